"""GFlowNet training criteria with analytic gradients.

Every loss returns a :class:`LossReport` whose ``gradient`` holds one array
per trainable parameter group of :class:`~gfunify.dag.PolicySet`:
``forward_logits``, ``backward_logits``, ``log_state_flow`` and ``log_z``
(the last as a length-1 array).

Gradients through the softmax policies use the identity
d log p_e / d logit_{e'} = [e = e'] - p_{e'} for siblings e, e'.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from .dag import (
    DagEnv,
    PolicySet,
    Trajectory,
    backward_path,
    make_rng,
    sample_backward,
    segment_logsumexp,
    segment_sum,
)
from .oracle import entropy, exact_elbo

PARAM_GROUPS = ("forward_logits", "backward_logits", "log_state_flow", "log_z")
EXACT = "exact-enumeration"
MONTE_CARLO = "monte-carlo"


class InvalidState(ValueError):
    pass


@dataclass
class LossReport:
    value: float
    gradient: dict[str, np.ndarray]
    estimator: str = EXACT
    n_samples: int = 1
    extras: dict = field(default_factory=dict)


def _zeros(env: DagEnv) -> dict[str, np.ndarray]:
    return {
        "forward_logits": np.zeros(env.n_edges),
        "backward_logits": np.zeros(env.n_edges),
        "log_state_flow": np.zeros(env.n_states),
        "log_z": np.zeros(1),
    }


def _select(grads: dict[str, np.ndarray], trainable: Iterable[str]) -> dict[str, np.ndarray]:
    trainable = tuple(trainable)
    unknown = set(trainable) - set(PARAM_GROUPS)
    if unknown:
        raise KeyError(f"unknown parameter groups {sorted(unknown)}")
    return {k: grads[k] for k in trainable}


def forward_logit_grad(env: DagEnv, policy: PolicySet, u: np.ndarray) -> np.ndarray:
    """Chain rule from per-edge d/d log P_F to the forward logits."""
    p = np.exp(policy.log_pf(env))
    return u - p * segment_sum(u, env.src, env.n_states)[env.src]


def backward_logit_grad(env: DagEnv, policy: PolicySet, u: np.ndarray) -> np.ndarray:
    p = np.exp(policy.log_pb(env))
    return u - p * segment_sum(u, env.dst, env.n_states)[env.dst]


def _edge_id(env: DagEnv, edge) -> int:
    if isinstance(edge, (tuple, list)):
        return env.edge_index[(int(edge[0]), int(edge[1]))]
    return int(edge)


# --------------------------------------------------------------------------
# per-state / per-edge / per-trajectory losses


def fm_loss(
    env: DagEnv,
    policy: PolicySet,
    state: int,
    log_space: bool = False,
    trainable: Sequence[str] = ("forward_logits",),
) -> LossReport:
    """Squared inflow/outflow mismatch at ``state``; edge flows are exp(forward_logits)."""
    if state == env.initial or env.is_terminal(state):
        raise InvalidState(f"flow matching is defined on intermediate states, got {state}")
    ins, outs = env.parent_edges[state], env.child_edges[state]
    fl = policy.forward_logits
    grads = _zeros(env)
    g = grads["forward_logits"]
    if log_space:
        li, lo = logsumexp(fl[ins]), logsumexp(fl[outs])
        d = li - lo
        g[ins] += 2 * d * np.exp(fl[ins] - li)
        g[outs] -= 2 * d * np.exp(fl[outs] - lo)
    else:
        fi, fo = np.exp(fl[ins]), np.exp(fl[outs])
        d = fi.sum() - fo.sum()
        g[ins] += 2 * d * fi
        g[outs] -= 2 * d * fo
    return LossReport(float(d * d), _select(grads, trainable))


def fm_terminal_loss(
    env: DagEnv,
    policy: PolicySet,
    x: int,
    log_space: bool = False,
    trainable: Sequence[str] = ("forward_logits",),
) -> LossReport:
    """Inflow at terminal ``x`` against its reward (the boundary condition F(x) = R(x))."""
    if not env.is_terminal(x):
        raise InvalidState(f"state {x} is not terminal")
    ins = env.parent_edges[x]
    fl = policy.forward_logits
    grads = _zeros(env)
    g = grads["forward_logits"]
    if log_space:
        li = logsumexp(fl[ins])
        d = li - env.log_reward_state[x]
        g[ins] += 2 * d * np.exp(fl[ins] - li)
    else:
        fi = np.exp(fl[ins])
        d = fi.sum() - env.reward[x]
        g[ins] += 2 * d * fi
    return LossReport(float(d * d), _select(grads, trainable))


def db_loss(
    env: DagEnv,
    policy: PolicySet,
    edge,
    trainable: Sequence[str] = ("forward_logits", "log_state_flow"),
) -> LossReport:
    """(log F(s) + log P_F(s'|s) - log F(s') - log P_B(s|s'))^2, F(x) clamped to R(x)."""
    e = _edge_id(env, edge)
    s, t = env.edges[e]
    lf_t = env.log_reward_state[t] if env.is_terminal(t) else policy.log_state_flow[t]
    r = policy.log_state_flow[s] + policy.log_pf(env)[e] - lf_t - policy.log_pb(env)[e]
    grads = _zeros(env)
    grads["log_state_flow"][s] += 2 * r
    if not env.is_terminal(t):
        grads["log_state_flow"][t] -= 2 * r
    u = np.zeros(env.n_edges)
    u[e] = 2 * r
    grads["forward_logits"] = forward_logit_grad(env, policy, u)
    grads["backward_logits"] = backward_logit_grad(env, policy, -u)
    return LossReport(float(r * r), _select(grads, trainable))


def tb_residual(env: DagEnv, policy: PolicySet, edges: Sequence[int]) -> float:
    idx = list(edges)
    x = int(env.dst[idx[-1]])
    return float(
        policy.log_z
        + policy.log_pf(env)[idx].sum()
        - env.log_reward_state[x]
        - policy.log_pb(env)[idx].sum()
    )


def tb_loss(
    env: DagEnv,
    policy: PolicySet,
    traj: Trajectory | Sequence[int],
    trainable: Sequence[str] = ("forward_logits", "log_z"),
) -> LossReport:
    """(log Z + log P_F(tau) - log R(x) - log P_B(tau|x))^2 for one trajectory.

    Log-probabilities are recomputed from ``policy``; any values cached on the
    trajectory are ignored.
    """
    edges = traj.edges if isinstance(traj, Trajectory) else tuple(traj)
    r = tb_residual(env, policy, edges)
    u = np.zeros(env.n_edges)
    np.add.at(u, list(edges), 2 * r)
    grads = _zeros(env)
    grads["log_z"][0] = 2 * r
    grads["forward_logits"] = forward_logit_grad(env, policy, u)
    grads["backward_logits"] = backward_logit_grad(env, policy, -u)
    return LossReport(r * r, _select(grads, trainable))


# --------------------------------------------------------------------------
# enumerated trajectory sets


class TrajectorySet:
    """All trajectories of an env as a sparse trajectory x edge incidence matrix."""

    def __init__(self, env: DagEnv, cap: int | None = None):
        paths = list(env.trajectories(cap))
        rows = np.repeat(np.arange(len(paths)), [len(p) for p in paths])
        cols = np.fromiter((e for p in paths for e in p), dtype=np.int64, count=len(rows))
        self.env = env
        self.paths = paths
        self.incidence = sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(len(paths), env.n_edges)
        )
        self.terminal = np.array([env.dst[p[-1]] for p in paths], dtype=np.int64)
        self.terminal_pos = env.terminal_index[self.terminal]
        self.log_reward = env.log_reward_state[self.terminal]

    def __len__(self) -> int:
        return len(self.paths)

    def log_pf(self, policy: PolicySet) -> np.ndarray:
        return self.incidence @ policy.log_pf(self.env)

    def log_pb(self, policy: PolicySet) -> np.ndarray:
        return self.incidence @ policy.log_pb(self.env)

    def edge_weights(self, w: np.ndarray) -> np.ndarray:
        return self.incidence.T @ w


def tb_loss_batch(
    env: DagEnv,
    policy: PolicySet,
    trajs: TrajectorySet,
    trainable: Sequence[str] = ("forward_logits", "log_z"),
    log_reward: np.ndarray | None = None,
) -> LossReport:
    """Mean TB loss over every enumerated trajectory.

    ``log_reward`` (aligned with ``env.terminals``) replaces the env's reward,
    which lets reward-learning loops retarget without rebuilding the env.
    """
    log_r = trajs.log_reward if log_reward is None else np.asarray(log_reward)[trajs.terminal_pos]
    r = policy.log_z + trajs.log_pf(policy) - log_r - trajs.log_pb(policy)
    n = len(trajs)
    u = trajs.edge_weights(2 * r / n)
    grads = _zeros(env)
    grads["log_z"][0] = 2 * r.sum() / n
    grads["forward_logits"] = forward_logit_grad(env, policy, u)
    grads["backward_logits"] = backward_logit_grad(env, policy, -u)
    return LossReport(float(np.mean(r * r)), _select(grads, trainable), EXACT, n)


def db_loss_all(
    env: DagEnv,
    policy: PolicySet,
    trainable: Sequence[str] = ("forward_logits", "log_state_flow"),
) -> LossReport:
    """Mean DB loss over every edge."""
    lf = policy.log_state_flow.copy()
    term = list(env.terminals)
    lf[term] = env.log_reward_state[term]
    r = lf[env.src] + policy.log_pf(env) - lf[env.dst] - policy.log_pb(env)
    n = env.n_edges
    u = 2 * r / n
    grads = _zeros(env)
    gs = segment_sum(u, env.src, env.n_states) - segment_sum(u, env.dst, env.n_states)
    gs[term] = 0.0
    grads["log_state_flow"] = gs
    grads["forward_logits"] = forward_logit_grad(env, policy, u)
    grads["backward_logits"] = backward_logit_grad(env, policy, -u)
    return LossReport(float(np.mean(r * r)), _select(grads, trainable), EXACT, n)


def fm_loss_all(
    env: DagEnv,
    policy: PolicySet,
    log_space: bool = False,
    trainable: Sequence[str] = ("forward_logits",),
) -> LossReport:
    """Mean over intermediate-state FM losses and terminal reward-matching terms.

    Same value as averaging :func:`fm_loss` and :func:`fm_terminal_loss` over
    every non-initial state, computed with segment sums.
    """
    n_s = env.n_states
    fl = policy.forward_logits
    term = np.zeros(n_s, dtype=bool)
    term[list(env.terminals)] = True
    if log_space:
        lin = segment_logsumexp(fl, env.dst, n_s)
        lout = segment_logsumexp(fl, env.src, n_s)
        target = np.where(term, env.log_reward_state, lout)
        d = np.where(np.arange(n_s) == env.initial, 0.0, lin - target)
        d_in = np.exp(fl - lin[env.dst])
        d_out = np.exp(fl - lout[env.src])
    else:
        fe = np.exp(fl)
        fin = segment_sum(fe, env.dst, n_s)
        target = np.where(term, np.exp(env.log_reward_state), segment_sum(fe, env.src, n_s))
        d = np.where(np.arange(n_s) == env.initial, 0.0, fin - target)
        d_in = d_out = fe
    n = n_s - 1
    # an edge enters dst as inflow and, unless src is initial, leaves src as outflow
    from_mid = env.src != env.initial
    grad = 2 * d[env.dst] * d_in - np.where(from_mid, 2 * d[env.src] * d_out, 0.0)
    grads = _zeros(env)
    grads["forward_logits"] = grad / n
    return LossReport(float(np.sum(d * d) / n), _select(grads, trainable), EXACT, n)


def kl_tb_loss(
    env: DagEnv,
    policy: PolicySet,
    data_dist: np.ndarray,
    trainable: Sequence[str] = ("forward_logits",),
    trajs: TrajectorySet | None = None,
) -> LossReport:
    """KL(P_B(tau) || P_F(tau)) with P_B(tau) = p_d(x) P_B(tau|x), by enumeration.

    ``extras`` carries ``neg_expected_elbo`` (computed through the oracle's
    edge-marginal route, not the enumeration used for the value) and
    ``data_entropy``, so that value = neg_expected_elbo - data_entropy.
    """
    trajs = trajs or TrajectorySet(env)
    data_dist = np.asarray(data_dist, dtype=float)
    pd = data_dist[trajs.terminal_pos]
    live = pd > 0
    with np.errstate(divide="ignore"):
        log_b = np.where(live, np.log(np.where(live, pd, 1.0)), -np.inf) + trajs.log_pb(policy)
    log_f = trajs.log_pf(policy)
    w = np.where(live, np.exp(log_b), 0.0)
    diff = np.where(live, log_b - log_f, 0.0)
    value = float(np.dot(w, diff))
    grads = _zeros(env)
    grads["forward_logits"] = forward_logit_grad(env, policy, trajs.edge_weights(-w))
    grads["backward_logits"] = backward_logit_grad(env, policy, trajs.edge_weights(w * diff))
    neg_elbo = -sum(
        p * exact_elbo(env, policy, policy, x) for x, p in zip(env.terminals, data_dist) if p > 0
    )
    extras = {"neg_expected_elbo": neg_elbo, "data_entropy": entropy(data_dist)}
    return LossReport(value, _select(grads, trainable), EXACT, len(trajs), extras)


def mle_fixed_backward_loss(
    env: DagEnv,
    policy: PolicySet,
    x: int,
    seed: int | np.random.Generator,
    trainable: Sequence[str] = ("forward_logits",),
) -> LossReport:
    """log P_B(tau|x) - log P_F(tau) for one tau ~ P_B(.|x); backward stays frozen."""
    if "backward_logits" in trainable:
        raise ValueError("the backward policy must be frozen for this estimator")
    traj = sample_backward(env, policy, x, seed)
    u = np.zeros(env.n_edges)
    np.add.at(u, list(traj.edges), -1.0)
    grads = _zeros(env)
    grads["forward_logits"] = forward_logit_grad(env, policy, u)
    value = traj.log_pb_given_x - traj.log_pf
    return LossReport(value, _select(grads, trainable), MONTE_CARLO, 1, {"trajectory": traj})


def iwae_bound(env: DagEnv, policy: PolicySet, x: int, k: int, seed: int | np.random.Generator) -> float:
    """log (1/K) sum_k P_F(tau_k) / P_B(tau_k|x), tau_k ~ P_B(.|x)."""
    if k < 1:
        raise ValueError("K must be at least 1")
    if not env.is_terminal(x):
        raise ValueError(f"state {x} is not terminal")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    log_pb = policy.log_pb(env)
    edge_logw = policy.log_pf(env) - log_pb
    logw = [edge_logw[backward_path(env, log_pb, x, rng)].sum() for _ in range(k)]
    return float(logsumexp(logw) - np.log(k))
