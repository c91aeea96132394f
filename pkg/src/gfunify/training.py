"""Full-batch (or Monte Carlo) training of a PolicySet under one objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import objectives as obj
from .dag import CapExceeded, DagEnv, PolicySet, make_rng, sample_forward
from .oracle import terminal_distribution, tv

OBJECTIVES = ("FM", "DB", "TB", "KL-TB", "MLE")
TRACE_HEADER = ("step", "loss", "logZ", "tv_to_target")


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class OptimizerSpec:
    name: str = "adam"  # "adam" or "sgd"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0  # multiplicative per-step factor


@dataclass
class ObjectiveSpec:
    name: str = "TB"
    learn_backward: bool = False
    log_space: bool = False
    data_dist: np.ndarray | None = None
    batch_size: int = 64
    trainable: Sequence[str] | None = None

    def groups(self) -> tuple[str, ...]:
        if self.trainable is not None:
            return tuple(self.trainable)
        base = {
            "FM": ("forward_logits",),
            "DB": ("forward_logits", "log_state_flow"),
            "TB": ("forward_logits", "log_z"),
            "KL-TB": ("forward_logits",),
            "MLE": ("forward_logits",),
        }[self.name]
        if self.learn_backward:
            if self.name in ("FM", "MLE"):
                raise ValueError(f"{self.name} has no trainable backward policy")
            base += ("backward_logits",)
        return base


class Adam:
    def __init__(self, spec: OptimizerSpec):
        self.spec = spec
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        sp = self.spec
        self.t += 1
        lr = sp.lr * sp.lr_decay ** (self.t - 1)
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= sp.beta1
            m += (1 - sp.beta1) * g
            v *= sp.beta2
            v += (1 - sp.beta2) * g * g
            mhat = m / (1 - sp.beta1**self.t)
            vhat = v / (1 - sp.beta2**self.t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + sp.eps)


class SGD:
    def __init__(self, spec: OptimizerSpec):
        self.spec = spec
        self.t = 0

    def step(self, params, grads) -> None:
        lr = self.spec.lr * self.spec.lr_decay**self.t
        self.t += 1
        for k, g in grads.items():
            params[k] -= lr * g


def make_optimizer(spec: OptimizerSpec):
    if spec.name == "adam":
        return Adam(spec)
    if spec.name == "sgd":
        return SGD(spec)
    raise ValueError(f"unknown optimizer {spec.name!r}")


@dataclass
class TrainResult:
    policy: PolicySet
    losses: list[float]
    trace: list[tuple] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _log_z(env: DagEnv, policy: PolicySet, name: str) -> float:
    if name == "DB":
        return float(policy.log_state_flow[env.initial])
    if name == "FM":
        out = env.child_edges[env.initial]
        return float(np.logaddexp.reduce(policy.forward_logits[out]))
    return float(policy.log_z)


class _Loss:
    """Closure that evaluates the chosen objective on the current params."""

    def __init__(self, env: DagEnv, spec: ObjectiveSpec, rng: np.random.Generator):
        self.env, self.spec, self.rng = env, spec, rng
        self.groups = spec.groups()
        self.trajs = None
        self.data = spec.data_dist
        if self.data is None:
            r = env.reward_vector()
            self.data = r / r.sum()
        if spec.name in ("TB", "KL-TB", "MLE"):
            try:
                self.trajs = obj.TrajectorySet(env)
            except CapExceeded:
                if spec.name == "KL-TB":
                    raise
        self.data_entropy = float(-(self.data[self.data > 0] * np.log(self.data[self.data > 0])).sum())

    @property
    def estimator(self) -> str:
        if self.spec.name in ("TB", "MLE") and self.trajs is None:
            return obj.MONTE_CARLO
        return obj.EXACT

    def __call__(self, policy: PolicySet) -> obj.LossReport:
        env, name, g = self.env, self.spec.name, self.groups
        if name == "FM":
            return obj.fm_loss_all(env, policy, self.spec.log_space, g)
        if name == "DB":
            return obj.db_loss_all(env, policy, g)
        if name == "KL-TB":
            return obj.kl_tb_loss(env, policy, self.data, g, self.trajs)
        if name == "TB":
            if self.trajs is not None:
                return obj.tb_loss_batch(env, policy, self.trajs, g)
            reps = [
                obj.tb_loss(env, policy, sample_forward(env, policy, self.rng), g)
                for _ in range(self.spec.batch_size)
            ]
            return _average(reps)
        if name == "MLE":
            if self.trajs is not None:
                # exact expectation of log P_B(tau|x) - log P_F(tau) under p_d(x) P_B(tau|x)
                rep = obj.kl_tb_loss(env, policy, self.data, g, self.trajs)
                rep.value += self.data_entropy
                return rep
            xs = self.rng.choice(len(env.terminals), size=self.spec.batch_size, p=self.data)
            reps = [
                obj.mle_fixed_backward_loss(env, policy, env.terminals[i], self.rng, g) for i in xs
            ]
            return _average(reps)
        raise ValueError(f"unknown objective {name!r}")


def _average(reps: list[obj.LossReport]) -> obj.LossReport:
    n = len(reps)
    grads = {k: sum(r.gradient[k] for r in reps) / n for k in reps[0].gradient}
    return obj.LossReport(sum(r.value for r in reps) / n, grads, obj.MONTE_CARLO, n)


def train(
    env: DagEnv,
    policy: PolicySet,
    objective: ObjectiveSpec | str = "TB",
    optimizer: OptimizerSpec | None = None,
    steps: int = 5000,
    seed: int = 0,
    target: np.ndarray | None = None,
    record_every: int = 1,
) -> TrainResult:
    """Optimize a private copy of ``policy``; deterministic given ``seed``.

    ``target`` is the terminal distribution used for the ``tv_to_target``
    trace column; it defaults to R/Z (or the data distribution for KL-TB and
    MLE). The returned trace has one row per ``record_every`` steps.
    """
    spec = ObjectiveSpec(objective) if isinstance(objective, str) else objective
    if spec.name not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {spec.name!r}")
    opt = make_optimizer(optimizer or OptimizerSpec())
    rng = make_rng(seed)
    loss_fn = _Loss(env, spec, rng)
    if target is None:
        target = loss_fn.data
    policy = policy.copy()
    params = {k: v.copy() for k, v in policy.params().items()}
    losses, trace = [], []
    for step in range(steps + 1):
        policy = policy.with_params(params)
        rep = loss_fn(policy)
        if not math.isfinite(rep.value) or not all(np.all(np.isfinite(g)) for g in rep.gradient.values()):
            raise NonFiniteLoss(step, rep.value)
        losses.append(rep.value)
        if step % record_every == 0 or step == steps:
            tv_val = tv(terminal_distribution(env, policy), target)
            trace.append((step, rep.value, _log_z(env, policy, spec.name), tv_val))
        if step == steps:
            break
        opt.step(params, rep.gradient)
    return TrainResult(policy, losses, trace)
