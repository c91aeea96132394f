"""Discretized SDEs as continuous-state GFlowNets.

States are time-augmented pairs (x, knot index); transitions only move
forward in time (forward policy) or backward in time (backward policy).
The canonical test process is the Ornstein-Uhlenbeck SDE dx = -x dt + sqrt(2) dw,
whose marginals and score are available in closed form.

Path simulation draws noise chunk by chunk: paths ``[j*CHUNK, (j+1)*CHUNK)``
use ``PCG64(SeedSequence([seed, j]))``, so the paths of a complete chunk
depend only on ``seed`` and the chunk index, not on the total path count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

CHUNK = 4096
LOG_2PI = math.log(2 * math.pi)


class WrongSpec(ValueError):
    pass


@dataclass
class SdeSpec:
    """dx = f(x, t) dt + g(t) dw on [0, 1] with a Gaussian initial law."""

    drift: Callable[[np.ndarray, float], np.ndarray]
    diffusion: Callable[[float], float]
    n_steps: int = 1000
    dim: int = 1
    init_mean: float | np.ndarray = 0.0
    init_var: float | np.ndarray = 1.0
    kind: str = "custom"

    @property
    def h(self) -> float:
        return 1.0 / self.n_steps

    def knots(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_steps + 1)

    def check_stability(self, x_range: float = 6.0) -> None:
        probe = np.linspace(-x_range, x_range, 101)[:, None] * np.ones(self.dim)
        if self.h * np.max(np.abs(self.drift(probe, 0.0))) > 1.0:
            raise ValueError("step too large for the drift: h*max|f| > 1")


def ou(dim: int = 1, m0=0.0, v0=1.0, n_steps: int = 1000) -> SdeSpec:
    return SdeSpec(
        drift=lambda x, t: -np.asarray(x, dtype=float),
        diffusion=lambda t: math.sqrt(2.0),
        n_steps=n_steps,
        dim=dim,
        init_mean=m0,
        init_var=v0,
        kind="ou",
    )


def ou_marginal(spec: SdeSpec, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the OU marginal at time ``t``."""
    if spec.kind != "ou":
        raise WrongSpec("closed-form marginals need the OU drift -x and diffusion sqrt(2)")
    m0, v0 = np.asarray(spec.init_mean, float), np.asarray(spec.init_var, float)
    e = math.exp(-t)
    return m0 * e, v0 * e * e + (1.0 - e * e)


class OuMarginals:
    """Analytic log-density and score of the OU marginals."""

    def __init__(self, spec: SdeSpec):
        ou_marginal(spec, 0.0)
        self.spec = spec

    def log_density(self, x: np.ndarray, t: float) -> np.ndarray:
        m, v = ou_marginal(self.spec, t)
        x = np.asarray(x, float)
        return np.sum(-0.5 * (x - m) ** 2 / v - 0.5 * np.log(2 * np.pi * v), axis=-1)

    def density_1d(self, x: np.ndarray, t: float) -> np.ndarray:
        m, v = ou_marginal(self.spec, t)
        m, v = float(np.ravel(m)[0]), float(np.ravel(v)[0])
        return np.exp(-0.5 * (x - m) ** 2 / v) / math.sqrt(2 * math.pi * v)

    def score(self, x: np.ndarray, t: float) -> np.ndarray:
        m, v = ou_marginal(self.spec, t)
        return -(np.asarray(x, float) - m) / v


def path_noise(seed: int, n_paths: int, dim: int):
    """Per-chunk generators; yields (slice, rng) covering ``n_paths`` paths."""
    for j, start in enumerate(range(0, n_paths, CHUNK)):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), j])))
        yield slice(start, min(start + CHUNK, n_paths)), rng


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))


def em_forward_kernel(spec: SdeSpec, x_t: np.ndarray, t: float, seed, h: float | None = None) -> np.ndarray:
    """x_{t+h} = x_t + f(x_t, t) h + sqrt(h) g(t) delta."""
    h = spec.h if h is None else h
    if t + h > 1.0 + 1e-12:
        raise ValueError("forward step leaves [0, 1]")
    x_t = np.asarray(x_t, float)
    noise = _rng(seed).standard_normal(x_t.shape)
    return x_t + spec.drift(x_t, t) * h + math.sqrt(h) * spec.diffusion(t) * noise


def em_backward_kernel(spec: SdeSpec, score, x_next: np.ndarray, t: float, seed, h: float | None = None) -> np.ndarray:
    """x_t = x_{t+h} + [g(t+h)^2 s(x_{t+h}, t+h) - f(x_{t+h}, t+h)] h + sqrt(h) g(t+h) delta."""
    h = spec.h if h is None else h
    if t < -1e-12:
        raise ValueError("backward step leaves [0, 1]")
    x_next = np.asarray(x_next, float)
    g = spec.diffusion(t + h)
    noise = _rng(seed).standard_normal(x_next.shape)
    mean = x_next + (g * g * score(x_next, t + h) - spec.drift(x_next, t + h)) * h
    return mean + math.sqrt(h) * g * noise


def log_forward_density(spec: SdeSpec, x_next, x_t, t: float, h: float) -> np.ndarray:
    """log P_F(x_{t+h} | x_t) of the Euler-Maruyama Gaussian step."""
    x_t = np.asarray(x_t, float)
    var = h * spec.diffusion(t) ** 2
    r = np.asarray(x_next, float) - x_t - h * spec.drift(x_t, t)
    d = x_t.shape[-1]
    return -0.5 * np.sum(r * r, axis=-1) / var - 0.5 * d * (LOG_2PI + math.log(var))


def log_backward_density(spec: SdeSpec, score, x_t, x_next, t: float, h: float) -> np.ndarray:
    """log P_B(x_t | x_{t+h}) of the modeled reverse step."""
    x_next = np.asarray(x_next, float)
    g = spec.diffusion(t + h)
    var = h * g * g
    mean = x_next + (g * g * score(x_next, t + h) - spec.drift(x_next, t + h)) * h
    r = np.asarray(x_t, float) - mean
    d = x_next.shape[-1]
    return -0.5 * np.sum(r * r, axis=-1) / var - 0.5 * d * (LOG_2PI + math.log(var))


# --------------------------------------------------------------------------
# score model


@dataclass
class ScoreModel:
    """s(x, t) = a(t) * x + b(t), a and b piecewise linear between time knots.

    ``a`` and ``b`` have shape (n_knots, dim); ``a`` acts elementwise.
    """

    knots: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.knots = np.atleast_1d(np.asarray(self.knots, float))
        self.a = np.asarray(self.a, float).reshape(len(self.knots), -1)
        self.b = np.asarray(self.b, float).reshape(len(self.knots), -1)

    @classmethod
    def constant(cls, a, b, dim: int = 1) -> "ScoreModel":
        return cls(np.array([0.0]), np.full((1, dim), a, float), np.full((1, dim), b, float))

    def weights(self, t: float) -> np.ndarray:
        """Interpolation weights of each knot at time ``t`` (clamped at the ends)."""
        k = self.knots
        w = np.zeros(len(k))
        if len(k) == 1 or t <= k[0]:
            w[0] = 1.0
        elif t >= k[-1]:
            w[-1] = 1.0
        else:
            j = int(np.searchsorted(k, t, side="right")) - 1
            lam = (t - k[j]) / (k[j + 1] - k[j])
            w[j], w[j + 1] = 1.0 - lam, lam
        return w

    def coefficients(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        w = self.weights(t)
        return w @ self.a, w @ self.b

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        a, b = self.coefficients(t)
        return a * np.asarray(x, float) + b


def ssm_loss(score: ScoreModel, x: np.ndarray, t: float, seed) -> tuple[float, dict[str, np.ndarray]]:
    """Monte Carlo sliced score matching objective at time ``t``.

    E[eps^T (d s/d x) eps + 0.5 (eps^T s(x, t))^2] with one standard normal
    projection per sample; returns the value and gradients w.r.t. the knot
    parameters ``a`` and ``b``.
    """
    x = np.atleast_2d(np.asarray(x, float))
    eps = _rng(seed).standard_normal(x.shape)
    a, b = score.coefficients(t)
    proj = np.sum(eps * (a * x + b), axis=1)
    value = float(np.mean(np.sum(a * eps * eps, axis=1) + 0.5 * proj * proj))
    ga = np.mean(eps * eps + proj[:, None] * eps * x, axis=0)
    gb = np.mean(proj[:, None] * eps, axis=0)
    w = score.weights(t)[:, None]
    return value, {"a": w * ga, "b": w * gb}


def fit_affine_score(samples: dict[float, np.ndarray], seed) -> ScoreModel:
    """Minimize the sliced score matching objective exactly, knot by knot.

    The objective is quadratic in (a(t), b(t)): with features
    phi = [eps * x, eps] it reads theta . c + 0.5 theta^T E[phi phi^T] theta,
    c = [E eps^2, 0], so the minimizer solves one linear system per knot.
    """
    times = sorted(samples)
    rng = _rng(seed)
    a_rows, b_rows = [], []
    for t in times:
        x = np.atleast_2d(np.asarray(samples[t], float))
        n, d = x.shape
        eps = rng.standard_normal(x.shape)
        phi = np.hstack([eps * x, eps])
        hess = phi.T @ phi / n
        c = np.concatenate([np.mean(eps * eps, axis=0), np.zeros(d)])
        theta = -np.linalg.solve(hess, c)
        a_rows.append(theta[:d])
        b_rows.append(theta[d:])
    return ScoreModel(np.array(times), np.array(a_rows), np.array(b_rows))


# --------------------------------------------------------------------------
# density grids and residuals


@dataclass
class GridDensity:
    """p(x, t) on a uniform 1-D grid at a set of time knots."""

    x: np.ndarray
    times: np.ndarray
    values: np.ndarray  # (n_times, M)
    mass_tol: float = 1e-6
    dx: float = field(init=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        self.times = np.asarray(self.times, float)
        self.values = np.atleast_2d(np.asarray(self.values, float))
        self.dx = float(self.x[1] - self.x[0])
        if not np.allclose(np.diff(self.x), self.dx, rtol=1e-9, atol=0):
            raise ValueError("grid must be uniform")
        if np.any(self.values < 0):
            raise ValueError("densities must be non-negative")
        mass = trapezoid(self.values, self.x, axis=1)
        if np.any(np.abs(mass - 1.0) > self.mass_tol):
            raise ValueError(f"trapezoid mass off by {np.max(np.abs(mass - 1)):.3g}")

    @classmethod
    def from_function(cls, fn, times: Sequence[float], m: int = 801, extent: float = 6.0, **kw):
        x = np.linspace(-extent, extent, m)
        return cls(x, np.asarray(times, float), np.array([fn(x, t) for t in times]), **kw)

    def knot(self, t: float) -> int:
        j = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[j], t, rel_tol=0, abs_tol=1e-12):
            raise ValueError(f"time {t} is not a grid knot")
        return j


def ou_grid(spec: SdeSpec, times: Sequence[float], m: int = 801, extent: float = 6.0) -> GridDensity:
    marg = OuMarginals(spec)
    return GridDensity.from_function(marg.density_1d, times, m, extent)


def propagate(grid: GridDensity, spec: SdeSpec, t: float, h: float) -> np.ndarray:
    """Push p(., t) through the Euler-Maruyama kernel with trapezoid quadrature."""
    p = grid.values[grid.knot(t)]
    x = grid.x
    g = spec.diffusion(t)
    mean = x + h * np.ravel(spec.drift(x[:, None], t))
    if g == 0:
        # deterministic map x' -> x' + h f(x'): change of variables
        jac = np.gradient(mean, x)
        return np.interp(x, mean, p / np.abs(jac), left=0.0, right=0.0)
    var = h * g * g
    # kernel[i, j] = N(x_i; mean_j, var); integrate over source points j
    kern = np.exp(-0.5 * (x[:, None] - mean[None, :]) ** 2 / var) / math.sqrt(2 * math.pi * var)
    return trapezoid(kern * p[None, :], x, axis=1)


def chapman_kolmogorov_residual(grid: GridDensity, spec: SdeSpec, t: float, h: float) -> float:
    """max_x |int p(x', t) P_h(x | x') dx' - p(x, t + h)|."""
    target = grid.values[grid.knot(t + h)]
    return float(np.max(np.abs(propagate(grid, spec, t, h) - target)))


def fokker_planck_residual(grid: GridDensity, spec: SdeSpec, t: float) -> float:
    """max over interior points of |dp/dt + d(p f)/dx - 0.5 d^2(p g^2)/dx^2|.

    Central second-order differences in time and space; ``t`` must have a
    knot on each side.
    """
    k = grid.knot(t)
    if k == 0 or k == len(grid.times) - 1:
        raise ValueError("need a time knot on each side of t")
    p = grid.values
    dpdt = (p[k + 1] - p[k - 1]) / (grid.times[k + 1] - grid.times[k - 1])
    x, dx = grid.x, grid.dx
    flux = p[k] * np.ravel(spec.drift(x[:, None], t))
    diff = p[k] * spec.diffusion(t) ** 2
    dflux = (flux[2:] - flux[:-2]) / (2 * dx)
    lap = (diff[2:] - 2 * diff[1:-1] + diff[:-2]) / (dx * dx)
    res = dpdt[1:-1] + dflux - 0.5 * lap
    return float(np.max(np.abs(res)))


def db_limit_residual(
    spec: SdeSpec,
    score,
    x_t: np.ndarray,
    t: float,
    eps: np.ndarray,
    h: float,
    marginals: OuMarginals | None = None,
) -> tuple[float, float]:
    """Scaled detailed-balance residual of one SDE step and its h -> 0 limit.

    With x_{t+h} = x_t + h f + sqrt(h) g eps, returns
    ([log p_t(x_t) + log P_F(x_{t+h}|x_t) - log p_{t+h}(x_{t+h})
      - log P_B(x_t|x_{t+h})] / (sqrt(h) g(t)),  eps^T (s(x_t, t) - grad log p_t(x_t))).
    """
    marginals = marginals or OuMarginals(spec)
    x_t = np.atleast_1d(np.asarray(x_t, float))
    eps = np.atleast_1d(np.asarray(eps, float))
    g = spec.diffusion(t)
    x_next = x_t + h * spec.drift(x_t, t) + math.sqrt(h) * g * eps
    total = (
        marginals.log_density(x_t, t)
        + log_forward_density(spec, x_next, x_t, t, h)
        - marginals.log_density(x_next, t + h)
        - log_backward_density(spec, score, x_t, x_next, t, h)
    )
    residual = float(total) / (math.sqrt(h) * g)
    limit = float(np.dot(eps, score(x_t, t) - marginals.score(x_t, t)))
    return residual, limit


def reverse_sampler(
    spec: SdeSpec,
    score,
    n_paths: int,
    seed: int,
    record: Sequence[float] = (0.0, 0.5, 1.0),
    x1: np.ndarray | None = None,
) -> dict[float, np.ndarray]:
    """Integrate the modeled reverse SDE from t = 1 down to t = 0.

    Starting points are drawn from the analytic t = 1 marginal unless ``x1``
    is given. Returns the sample sets at the requested knot times.
    """
    knots = spec.knots()
    want = {int(round(r * spec.n_steps)): float(r) for r in record}
    out = {r: np.empty((n_paths, spec.dim)) for r in want.values()}
    for sl, rng in path_noise(seed, n_paths, spec.dim):
        n = sl.stop - sl.start
        if x1 is None:
            m, v = ou_marginal(spec, 1.0)
            x = m + np.sqrt(v) * rng.standard_normal((n, spec.dim))
        else:
            x = np.asarray(x1, float)[sl].reshape(n, spec.dim)
        if spec.n_steps in want:
            out[want[spec.n_steps]][sl] = x
        for k in range(spec.n_steps - 1, -1, -1):
            x = em_backward_kernel(spec, score, x, knots[k], rng)
            if k in want:
                out[want[k]][sl] = x
    return out


def forward_sampler(spec: SdeSpec, n_paths: int, seed: int, record: Sequence[float] = (0.0, 0.5, 1.0)) -> dict[float, np.ndarray]:
    """Euler-Maruyama paths from the initial Gaussian; samples at the requested times."""
    knots = spec.knots()
    want = {int(round(r * spec.n_steps)): float(r) for r in record}
    out = {r: np.empty((n_paths, spec.dim)) for r in want.values()}
    m0 = np.asarray(spec.init_mean, float)
    s0 = np.sqrt(np.asarray(spec.init_var, float))
    for sl, rng in path_noise(seed, n_paths, spec.dim):
        n = sl.stop - sl.start
        x = m0 + s0 * rng.standard_normal((n, spec.dim))
        if 0 in want:
            out[want[0]][sl] = x
        for k in range(spec.n_steps):
            x = em_forward_kernel(spec, x, knots[k], rng)
            if k + 1 in want:
                out[want[k + 1]][sl] = x
    return out
