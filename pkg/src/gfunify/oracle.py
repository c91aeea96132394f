"""Exact ground truth on enumerable DAGs.

Everything is computed by topological sweeps in log space, never by
sampling. Trajectory enumeration is used only where a quantity genuinely
needs per-trajectory terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .dag import DagEnv, PolicySet, segment_logsumexp


class ZeroMass(ValueError):
    pass


def _lse(v: np.ndarray) -> float:
    # scipy's logsumexp carries too much overhead for the short vectors seen here
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


@dataclass(frozen=True)
class ExactFlows:
    log_state_flow: np.ndarray
    log_edge_flow: np.ndarray
    log_partition: float
    terminal_dist: np.ndarray  # aligned with env.terminals

    @property
    def state_flow(self) -> np.ndarray:
        return np.exp(self.log_state_flow)

    @property
    def edge_flow(self) -> np.ndarray:
        return np.exp(self.log_edge_flow)

    @property
    def partition(self) -> float:
        return float(np.exp(self.log_partition))


def exact_flows(env: DagEnv, backward: PolicySet) -> ExactFlows:
    """Flows consistent with ``R`` and the backward policy.

    F(x) = R(x); F(s, s') = F(s') P_B(s|s'); F(s) = sum of outgoing edge flows.
    """
    log_pb = backward.log_pb(env)
    log_f = np.full(env.n_states, -np.inf)
    log_fe = np.full(env.n_edges, -np.inf)
    for s in reversed(env.order):
        if env.is_terminal(s):
            log_f[s] = env.log_reward_state[s]
        else:
            out = env.child_edges[s]
            log_fe[out] = log_f[env.dst[out]] + log_pb[out]
            log_f[s] = _lse(log_fe[out])
    log_r = env.log_reward_state[list(env.terminals)]
    return ExactFlows(
        log_state_flow=log_f,
        log_edge_flow=log_fe,
        log_partition=float(log_f[env.initial]),
        terminal_dist=np.exp(log_r - logsumexp(log_r)),
    )


def induced_policy(env: DagEnv, flows: ExactFlows) -> PolicySet:
    """PolicySet whose P_F is F(s,s')/F(s), flows and log Z taken from ``flows``.

    Backward logits are set to log F(s, s'), which reproduces F(s,s')/F(s').
    """
    fe = flows.log_edge_flow.copy()
    return PolicySet(
        forward_logits=fe.copy(),
        backward_logits=fe.copy(),
        log_state_flow=flows.log_state_flow.copy(),
        log_z=flows.log_partition,
    )


def log_reach(env: DagEnv, forward: PolicySet) -> np.ndarray:
    """log P(rollout visits s) for every state."""
    log_pf = forward.log_pf(env)
    rho = np.full(env.n_states, -np.inf)
    rho[env.initial] = 0.0
    for s in env.order:
        pe = env.parent_edges[s]
        if len(pe):
            rho[s] = _lse(rho[env.src[pe]] + log_pf[pe])
    return rho


def terminal_distribution(env: DagEnv, forward: PolicySet) -> np.ndarray:
    """P_T(x) aligned with ``env.terminals``."""
    return np.exp(log_reach(env, forward)[list(env.terminals)])


def exact_log_likelihood(env: DagEnv, forward: PolicySet, x: int) -> float:
    if not env.is_terminal(x):
        raise ValueError(f"state {x} is not terminal")
    val = float(log_reach(env, forward)[x])
    if not np.isfinite(val):
        raise ZeroMass(f"no forward mass reaches terminal {x}")
    return val


def backward_edge_marginals(env: DagEnv, backward: PolicySet, x: int) -> np.ndarray:
    """Probability that a P_B(.|x) ancestor walk from ``x`` uses each edge."""
    log_pb = backward.log_pb(env)
    q = np.zeros(env.n_states)
    q[x] = 1.0
    use = np.zeros(env.n_edges)
    for s in reversed(env.order):
        if q[s] == 0.0:
            continue
        pe = env.parent_edges[s]
        if len(pe):
            w = q[s] * np.exp(log_pb[pe])
            use[pe] += w
            np.add.at(q, env.src[pe], w)
    return use


def exact_elbo(env: DagEnv, forward: PolicySet, backward: PolicySet, x: int) -> float:
    """E_{P_B(tau|x)}[log P_F(tau) - log P_B(tau|x)] via edge marginals."""
    use = backward_edge_marginals(env, backward, x)
    diff = forward.log_pf(env) - backward.log_pb(env)
    mask = use > 0
    return float(np.dot(use[mask], diff[mask]))


def tv(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def flow_matching_residual(env: DagEnv, flows: ExactFlows) -> float:
    """Max relative |inflow - outflow| over intermediate states."""
    inflow = segment_logsumexp(flows.log_edge_flow, env.dst, env.n_states)
    outflow = segment_logsumexp(flows.log_edge_flow, env.src, env.n_states)
    worst = 0.0
    for s in range(env.n_states):
        if s == env.initial or env.is_terminal(s):
            continue
        worst = max(worst, abs(np.expm1(inflow[s] - outflow[s])))
    return worst
