"""Enumerable DAG state spaces, policies and trajectory sampling.

States are integers ``0..n_states-1`` with an optional side table of labels.
Edges are indexed ``0..n_edges-1``; every per-edge quantity (logits, flows)
is a flat array aligned with that index.

Sampling uses numpy's PCG64 bit generator seeded with a single 64-bit
integer and consumes exactly one ``random()`` double per transition, so
trajectories are bit-reproducible across platforms.
"""

from __future__ import annotations

import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_ENUM_CAP = 10**6


class DagError(ValueError):
    """Malformed state graph."""

    def __init__(self, message: str, states: Sequence[int] = ()):
        super().__init__(message)
        self.states = tuple(states)


class CycleDetected(DagError):
    pass


class UnreachableState(DagError):
    pass


class DeadEnd(DagError):
    pass


class CapExceeded(ValueError):
    """Enumeration would exceed the configured trajectory cap."""


def enum_cap() -> int:
    """Trajectory enumeration cap; ``GFU_ENUM_CAP`` overrides the default."""
    raw = os.environ.get("GFU_ENUM_CAP")
    return int(raw) if raw else DEFAULT_ENUM_CAP


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def segment_logsumexp(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Log-sum-exp of ``values`` within each group id; empty groups give -inf."""
    m = np.full(n_groups, -np.inf)
    np.maximum.at(m, groups, values)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = np.zeros(n_groups)
    np.add.at(s, groups, np.exp(values - safe[groups]))
    with np.errstate(divide="ignore"):
        return safe + np.log(s)


def segment_sum(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.zeros(n_groups)
    np.add.at(out, groups, values)
    return out


def validate_dag(
    n_states: int,
    initial: int,
    edges: Sequence[tuple[int, int]],
    terminals: Iterable[int],
) -> list[int]:
    """Return a topological order of the states or raise a :class:`DagError`.

    Checks acyclicity, reachability from ``initial`` and that every
    non-terminal state has at least one child.
    """
    terminals = set(terminals)
    children: list[list[int]] = [[] for _ in range(n_states)]
    indeg = [0] * n_states
    seen_edges = set()
    for s, t in edges:
        if not (0 <= s < n_states and 0 <= t < n_states):
            raise DagError(f"edge ({s}, {t}) references an unknown state", (s, t))
        if (s, t) in seen_edges:
            raise DagError(f"duplicate edge ({s}, {t})", (s, t))
        seen_edges.add((s, t))
        children[s].append(t)
        indeg[t] += 1

    queue = deque(i for i in range(n_states) if indeg[i] == 0)
    order = []
    while queue:
        s = queue.popleft()
        order.append(s)
        for t in children[s]:
            indeg[t] -= 1
            if indeg[t] == 0:
                queue.append(t)
    if len(order) < n_states:
        cyc = sorted(i for i in range(n_states) if indeg[i] > 0)
        raise CycleDetected(f"cycle through states {cyc}", cyc)

    reached = {initial}
    stack = [initial]
    while stack:
        for t in children[stack.pop()]:
            if t not in reached:
                reached.add(t)
                stack.append(t)
    missing = sorted(set(range(n_states)) - reached)
    if missing:
        raise UnreachableState(f"states {missing} unreachable from {initial}", missing)

    dead = sorted(s for s in range(n_states) if not children[s] and s not in terminals)
    if dead:
        raise DeadEnd(f"non-terminal states {dead} have no children", dead)
    busy = sorted(s for s in terminals if children[s])
    if busy:
        raise DagError(f"terminal states {busy} have outgoing edges", busy)

    # the initial state must come first
    order.remove(initial)
    return [initial] + order


@dataclass(frozen=True, eq=False)
class DagEnv:
    """Directed acyclic state graph with a reward on its terminal states."""

    n_states: int
    initial: int
    edges: tuple[tuple[int, int], ...]
    reward: dict[int, float]
    labels: tuple[Hashable, ...] | None = None
    order: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        edges = tuple((int(s), int(t)) for s, t in self.edges)
        object.__setattr__(self, "edges", edges)
        bad = {x: r for x, r in self.reward.items() if not (r > 0 and math.isfinite(r))}
        if bad:
            raise DagError(f"rewards must be positive and finite: {bad}", tuple(bad))
        order = validate_dag(self.n_states, self.initial, edges, self.reward)
        object.__setattr__(self, "order", tuple(order))

        src = np.array([e[0] for e in edges], dtype=np.int64)
        dst = np.array([e[1] for e in edges], dtype=np.int64)
        children = [[] for _ in range(self.n_states)]
        parents = [[] for _ in range(self.n_states)]
        for i, (s, t) in enumerate(edges):
            children[s].append(i)
            parents[t].append(i)
        terminals = tuple(sorted(self.reward))
        log_r = np.full(self.n_states, np.nan)
        for x in terminals:
            log_r[x] = math.log(self.reward[x])
        term_index = np.full(self.n_states, -1, dtype=np.int64)
        term_index[list(terminals)] = np.arange(len(terminals))
        for name, value in [
            ("src", src),
            ("dst", dst),
            ("child_edges", tuple(np.array(c, dtype=np.int64) for c in children)),
            ("parent_edges", tuple(np.array(p, dtype=np.int64) for p in parents)),
            ("terminals", terminals),
            ("log_reward_state", log_r),
            ("terminal_index", term_index),
            ("edge_index", {e: i for i, e in enumerate(edges)}),
        ]:
            object.__setattr__(self, name, value)

    @classmethod
    def from_labeled(
        cls,
        edges: Iterable[tuple[Hashable, Hashable]],
        initial: Hashable,
        reward: dict[Hashable, float],
    ) -> "DagEnv":
        """Build from arbitrary hashable labels; ids follow first appearance."""
        ids: dict[Hashable, int] = {initial: 0}
        int_edges = []
        for s, t in edges:
            for lab in (s, t):
                if lab not in ids:
                    ids[lab] = len(ids)
            int_edges.append((ids[s], ids[t]))
        for lab in reward:
            if lab not in ids:
                ids[lab] = len(ids)
        labels = tuple(sorted(ids, key=ids.get))
        return cls(
            n_states=len(ids),
            initial=0,
            edges=tuple(int_edges),
            reward={ids[k]: float(v) for k, v in reward.items()},
            labels=labels,
        )

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def label(self, s: int) -> Hashable:
        return self.labels[s] if self.labels is not None else s

    def state(self, label: Hashable) -> int:
        if self.labels is None:
            return int(label)
        return self.labels.index(label)

    def reward_vector(self) -> np.ndarray:
        """Rewards aligned with :attr:`terminals`."""
        return np.array([self.reward[x] for x in self.terminals])

    def is_terminal(self, s: int) -> bool:
        return s in self.reward

    def n_trajectories(self) -> int:
        """Number of complete trajectories (exact integer path count)."""
        count = [0] * self.n_states
        count[self.initial] = 1
        for s in self.order:
            for e in self.child_edges[s]:
                count[self.dst[e]] += count[s]
        return sum(count[x] for x in self.terminals)

    def trajectories(self, cap: int | None = None) -> Iterator[tuple[int, ...]]:
        """Enumerate all trajectories as tuples of edge ids, depth first."""
        cap = enum_cap() if cap is None else cap
        n = self.n_trajectories()
        if n > cap:
            raise CapExceeded(f"{n} trajectories exceed the enumeration cap {cap}")
        stack: list[tuple[int, tuple[int, ...]]] = [(self.initial, ())]
        while stack:
            s, path = stack.pop()
            if self.is_terminal(s):
                yield path
                continue
            for e in reversed(self.child_edges[s]):
                stack.append((int(self.dst[e]), path + (int(e),)))

    def states_of(self, edge_path: Sequence[int]) -> tuple[int, ...]:
        if not edge_path:
            return (self.initial,)
        return (int(self.src[edge_path[0]]),) + tuple(int(self.dst[e]) for e in edge_path)


@dataclass
class PolicySet:
    """Softmax-parameterized forward/backward policies plus flow parameters."""

    forward_logits: np.ndarray
    backward_logits: np.ndarray
    log_state_flow: np.ndarray
    log_z: float = 0.0

    @classmethod
    def uniform(cls, env: DagEnv) -> "PolicySet":
        return cls(
            forward_logits=np.zeros(env.n_edges),
            backward_logits=np.zeros(env.n_edges),
            log_state_flow=np.zeros(env.n_states),
            log_z=0.0,
        )

    @classmethod
    def random(cls, env: DagEnv, seed: int, scale: float = 1.0) -> "PolicySet":
        rng = make_rng(seed)
        return cls(
            forward_logits=scale * rng.standard_normal(env.n_edges),
            backward_logits=scale * rng.standard_normal(env.n_edges),
            log_state_flow=scale * rng.standard_normal(env.n_states),
            log_z=float(scale * rng.standard_normal()),
        )

    def copy(self) -> "PolicySet":
        return PolicySet(
            self.forward_logits.copy(),
            self.backward_logits.copy(),
            self.log_state_flow.copy(),
            float(self.log_z),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "forward_logits": self.forward_logits,
            "backward_logits": self.backward_logits,
            "log_state_flow": self.log_state_flow,
            "log_z": np.array([self.log_z]),
        }

    def with_params(self, params: dict[str, np.ndarray]) -> "PolicySet":
        new = self.copy()
        for k, v in params.items():
            if k == "log_z":
                new.log_z = float(np.asarray(v).reshape(-1)[0])
            else:
                setattr(new, k, np.array(v, dtype=float))
        return new

    def log_pf(self, env: DagEnv) -> np.ndarray:
        """Per-edge log P_F(s'|s): softmax over the children of s."""
        lse = segment_logsumexp(self.forward_logits, env.src, env.n_states)
        return self.forward_logits - lse[env.src]

    def log_pb(self, env: DagEnv) -> np.ndarray:
        """Per-edge log P_B(s|s'): softmax over the parents of s'."""
        lse = segment_logsumexp(self.backward_logits, env.dst, env.n_states)
        return self.backward_logits - lse[env.dst]


@dataclass(frozen=True)
class Trajectory:
    states: tuple[int, ...]
    edges: tuple[int, ...]
    log_pf: float
    log_pb_given_x: float

    @property
    def terminal(self) -> int:
        return self.states[-1]


def make_trajectory(env: DagEnv, policy: PolicySet, edges: Sequence[int]) -> Trajectory:
    edges = tuple(int(e) for e in edges)
    idx = list(edges)
    return Trajectory(
        states=env.states_of(edges),
        edges=edges,
        log_pf=float(policy.log_pf(env)[idx].sum()),
        log_pb_given_x=float(policy.log_pb(env)[idx].sum()),
    )


def _draw(rng: np.random.Generator, log_probs: np.ndarray) -> int:
    p = np.exp(log_probs - log_probs.max())
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side="right")), len(p) - 1)


def sample_forward(env: DagEnv, policy: PolicySet, seed: int | np.random.Generator) -> Trajectory:
    """Roll out P_F from the initial state until a terminal is hit."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    log_pf = policy.log_pf(env)
    s, path = env.initial, []
    while not env.is_terminal(s):
        cand = env.child_edges[s]
        e = int(cand[_draw(rng, log_pf[cand])])
        path.append(e)
        s = int(env.dst[e])
    return make_trajectory(env, policy, path)


def backward_path(env: DagEnv, log_pb: np.ndarray, x: int, rng: np.random.Generator) -> list[int]:
    """Edge ids of one ancestor walk from ``x`` given per-edge log P_B."""
    s, path = x, []
    while s != env.initial:
        cand = env.parent_edges[s]
        e = int(cand[_draw(rng, log_pb[cand])])
        path.append(e)
        s = int(env.src[e])
    return path[::-1]


def sample_backward(
    env: DagEnv, policy: PolicySet, x: int, seed: int | np.random.Generator
) -> Trajectory:
    """Ancestor-sample a trajectory ending at terminal ``x`` under P_B."""
    if not env.is_terminal(x):
        raise ValueError(f"state {x} is not terminal")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return make_trajectory(env, policy, backward_path(env, policy.log_pb(env), x, rng))
