"""Learning the reward from data: EB-GFN alternation and GAN-style rewards.

All loops run on enumerable envs so that the generator distribution p_g is
the exact terminal distribution of the current forward policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax

from .dag import DagEnv, PolicySet, make_rng
from .objectives import TrajectorySet, tb_loss_batch
from .oracle import terminal_distribution, tv
from .training import Adam, NonFiniteLoss, OptimizerSpec

EBGFN_TRACE_HEADER = ("round", "tv", "mean_energy_data", "mean_energy_model")
GAN_TRACE_HEADER = ("round", "tv", "d_gap")
D_CLAMP = 1e-6


class DegenerateD(RuntimeError):
    pass


class NoConvergence(RuntimeError):
    pass


@dataclass
class EnergyModel:
    """Tabular energies per terminal (aligned with ``env.terminals``); R = exp(-E)."""

    energies: np.ndarray

    def log_reward(self) -> np.ndarray:
        return -self.energies

    def distribution(self) -> np.ndarray:
        return np.exp(log_softmax(-self.energies))


@dataclass
class Discriminator:
    """Per-terminal logits; D(x) = sigmoid(d(x))."""

    logits: np.ndarray

    def prob(self) -> np.ndarray:
        return expit(self.logits)


def optimal_discriminator(p_data: np.ndarray, p_gen: np.ndarray) -> np.ndarray:
    return p_data / (p_data + p_gen)


class _Generator:
    """A PolicySet trained by warm-started full-batch TB against a moving reward."""

    def __init__(self, env: DagEnv, policy: PolicySet, optimizer: OptimizerSpec):
        self.env = env
        self.policy = policy.copy()
        self.trajs = TrajectorySet(env)
        self.opt = Adam(optimizer)
        self.params = {k: v.copy() for k, v in self.policy.params().items()}

    def fit(self, log_reward: np.ndarray, steps: int, round_: int) -> float:
        value = 0.0
        for _ in range(steps):
            self.policy = self.policy.with_params(self.params)
            rep = tb_loss_batch(self.env, self.policy, self.trajs, log_reward=log_reward)
            value = rep.value
            if not math.isfinite(value):
                raise NonFiniteLoss(round_, value)
            self.opt.step(self.params, rep.gradient)
        self.policy = self.policy.with_params(self.params)
        return value

    def distribution(self) -> np.ndarray:
        return terminal_distribution(self.env, self.policy)


def ebgfn_alternate(
    env: DagEnv,
    policy: PolicySet,
    data_dist: np.ndarray,
    rounds: int = 200,
    inner_steps: int = 20,
    seed: int = 0,
    energy_lr: float = 1.0,
    n_negatives: int = 4096,
    optimizer: OptimizerSpec | None = None,
):
    """Alternate contrastive energy updates with TB fitting of the sampler.

    Each round takes one gradient step on E_{p_d}[E] - E_{p_g}[E], with p_g
    estimated from ``n_negatives`` terminals drawn from the current
    GFlowNet, then runs ``inner_steps`` TB steps with R = exp(-E).
    Terminals are drawn by a multinomial on the exact terminal distribution,
    which has the same law as the terminals of forward rollouts.

    Returns (EnergyModel, PolicySet, trace) with trace rows
    (round, tv, mean_energy_data, mean_energy_model).
    """
    data = np.asarray(data_dist, dtype=float)
    rng = make_rng(seed)
    gen = _Generator(env, policy, optimizer or OptimizerSpec(lr=0.05))
    energy = np.zeros(len(env.terminals))
    trace = []
    for r in range(1, rounds + 1):
        p_g = gen.distribution()
        p_hat = rng.multinomial(n_negatives, p_g / p_g.sum()) / n_negatives
        energy = energy - energy_lr * (data - p_hat)
        energy -= energy.mean()
        if not np.all(np.isfinite(energy)):
            raise NonFiniteLoss(r, float("nan"))
        gen.fit(-energy, inner_steps, r)
        p_g = gen.distribution()
        trace.append((r, tv(p_g, data), float(data @ energy), float(p_g @ energy)))
    return EnergyModel(energy), gen.policy, trace


def train_discriminator(
    disc: Discriminator,
    p_data: np.ndarray,
    p_gen: np.ndarray,
    steps: int,
    opt: Adam,
) -> Discriminator:
    """Adam steps on the exact logistic loss -E_d log D - E_g log(1 - D)."""
    params = {"logits": disc.logits.copy()}
    for _ in range(steps):
        grad = expit(params["logits"]) * (p_data + p_gen) - p_data
        opt.step(params, {"logits": grad})
    return Discriminator(params["logits"])


def ganflow_alternate(
    env: DagEnv,
    policy: PolicySet,
    data_dist: np.ndarray,
    rounds: int = 500,
    seed: int = 0,
    reward: str = "corrected",
    disc_steps: int = 50,
    inner_steps: int = 20,
    oracle_discriminator: bool = False,
    disc_optimizer: OptimizerSpec | None = None,
    optimizer: OptimizerSpec | None = None,
):
    """Alternate discriminator training with TB fitting of the GFlowNet.

    ``reward="corrected"`` trains against log R = log(D/(1-D)) + log p_g with
    p_g the exact terminal distribution of the current policy;
    ``reward="naive"`` uses R = D. ``oracle_discriminator`` replaces the
    learned D by p_d/(p_d+p_g) every round.

    Returns (Discriminator, PolicySet, trace) with rows (round, tv, d_gap),
    d_gap being max |D - D*| before the generator update.
    """
    if reward not in ("corrected", "naive"):
        raise ValueError(f"unknown reward {reward!r}")
    data = np.asarray(data_dist, dtype=float)
    gen = _Generator(env, policy, optimizer or OptimizerSpec(lr=0.05))
    disc = Discriminator(np.zeros(len(env.terminals)))
    d_opt = Adam(disc_optimizer or OptimizerSpec(lr=0.3))
    trace = []
    # seed is accepted for interface uniformity; every update uses exact expectations
    del seed
    for r in range(1, rounds + 1):
        p_g = gen.distribution()
        d_star = optimal_discriminator(data, p_g)
        if oracle_discriminator:
            with np.errstate(divide="ignore"):
                disc = Discriminator(np.log(d_star) - np.log1p(-d_star))
        else:
            disc = train_discriminator(disc, data, p_g, disc_steps, d_opt)
        d = disc.prob()
        if np.any(d < D_CLAMP) or np.any(d > 1 - D_CLAMP):
            raise DegenerateD(f"discriminator saturated in round {r}")
        if reward == "corrected":
            log_r = disc.logits + np.log(p_g)
        else:
            log_r = np.log(d)
        gen.fit(log_r, inner_steps, r)
        trace.append((r, tv(gen.distribution(), data), float(np.max(np.abs(d - d_star)))))
    return disc, gen.policy, trace


def naive_gan_reward_fixed_point(
    env: DagEnv | None,
    data_dist: np.ndarray,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Solve p = normalize(p_d / (p_d + p)) by damped fixed-point iteration."""
    data = np.asarray(data_dist, dtype=float)
    if env is not None and len(env.terminals) != len(data):
        raise ValueError("data_dist must have one entry per terminal")
    p = np.full(len(data), 1.0 / len(data))
    for _ in range(max_iter):
        d = data / (data + p)
        new = (1 - damping) * p + damping * d / d.sum()
        if np.max(np.abs(new - p)) < tol:
            return new
        p = new
    raise NoConvergence(f"no convergence after {max_iter} iterations")


def naive_gan_fixed_point_bisection(data_dist: np.ndarray, tol: float = 1e-15) -> np.ndarray:
    """Independent solver for the same fixed point.

    p_i = c p_d,i / (p_d,i + p_i) is a quadratic in p_i with positive root
    p_i(c) = (sqrt(p_d,i^2 + 4 c p_d,i) - p_d,i) / 2, increasing in c; bisect
    on c until sum_i p_i(c) = 1.
    """
    data = np.asarray(data_dist, dtype=float)

    def mass(c):
        return np.sum(2 * c * data / (np.sqrt(data * data + 4 * c * data) + data)) if c > 0 else 0.0

    lo, hi = 0.0, 1.0
    while mass(hi) < 1.0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) < 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * hi:
            break
    c = 0.5 * (lo + hi)
    p = 2 * c * data / (np.sqrt(data * data + 4 * c * data) + data)
    return p / p.sum()
