import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from gfunify.sde import (
    CHUNK,
    GridDensity,
    OuMarginals,
    ScoreModel,
    SdeSpec,
    WrongSpec,
    chapman_kolmogorov_residual,
    db_limit_residual,
    em_backward_kernel,
    em_forward_kernel,
    fit_affine_score,
    fokker_planck_residual,
    forward_sampler,
    ou,
    ou_grid,
    ou_marginal,
    reverse_sampler,
    ssm_loss,
)


def brownian(n_steps=1000):
    return SdeSpec(drift=lambda x, t: np.zeros_like(np.asarray(x, float)), diffusion=lambda t: 1.0, n_steps=n_steps)


def frozen():
    return SdeSpec(drift=lambda x, t: np.zeros_like(np.asarray(x, float)), diffusion=lambda t: 0.0)


def check_moments(x, mean, var, n_sigma=3.0):
    n = len(x)
    assert abs(x.mean() - mean) < n_sigma * math.sqrt(var / n)
    # variance of the sample variance for a Gaussian is 2 var^2 / (n - 1)
    assert abs(x.var(ddof=1) - var) < n_sigma * var * math.sqrt(2 / (n - 1))


# ---- kernels and marginals


def test_em_kernel_brownian_moments():
    x = em_forward_kernel(brownian(), np.zeros((100_000, 1)), 0.0, seed=0, h=0.01)
    check_moments(x[:, 0], 0.0, 0.01)


def test_em_kernel_ou_moments():
    x = em_forward_kernel(ou(), np.ones((100_000, 1)), 0.3, seed=1, h=0.01)
    check_moments(x[:, 0], 0.99, 0.02)


def test_em_backward_kernel_moments():
    spec = ou()
    score = ScoreModel.constant(-1.0, 0.0)
    x = em_backward_kernel(spec, score, np.ones((100_000, 1)), 0.5, seed=2, h=0.01)
    # mean = 1 + (2 * (-1) - (-1)) * 0.01
    check_moments(x[:, 0], 0.99, 0.02)


def test_kernels_refuse_to_leave_the_interval():
    with pytest.raises(ValueError):
        em_forward_kernel(ou(), np.zeros((1, 1)), 0.995, seed=0, h=0.01)
    with pytest.raises(ValueError):
        em_backward_kernel(ou(), ScoreModel.constant(-1, 0), np.zeros((1, 1)), -0.01, seed=0, h=0.01)


def test_kernel_seed_determinism():
    a = em_forward_kernel(ou(), np.zeros((10, 1)), 0.0, seed=5)
    b = em_forward_kernel(ou(), np.zeros((10, 1)), 0.0, seed=5)
    assert_allclose(a, b, rtol=0, atol=0)


def test_stationary_marginal_is_constant():
    spec = ou()
    for t in (0.0, 0.3, 1.0):
        m, v = ou_marginal(spec, t)
        assert_allclose([m, v], [0.0, 1.0], atol=1e-15)


def test_marginal_relaxes_toward_standard_normal():
    spec = ou(m0=2.0, v0=0.1)
    m, v = ou_marginal(spec, 0.0)
    assert_allclose([m, v], [2.0, 0.1])
    m, v = ou_marginal(spec, 1.0)
    assert_allclose(m, 2.0 * math.exp(-1))
    assert_allclose(v, 0.1 * math.exp(-2) + 1 - math.exp(-2))


def test_simulated_paths_match_marginal():
    spec = ou(m0=1.0, v0=0.5)
    x = forward_sampler(spec, 200_000, seed=0, record=(0.5,))[0.5][:, 0]
    m, v = ou_marginal(spec, 0.5)
    # Euler-Maruyama bias is O(h) = 1e-3, well under the statistical band
    check_moments(x, float(m), float(v), n_sigma=4.0)


def test_marginals_need_ou():
    with pytest.raises(WrongSpec):
        ou_marginal(brownian(), 0.5)
    with pytest.raises(WrongSpec):
        OuMarginals(brownian())


def test_score_is_gradient_of_log_density():
    marg = OuMarginals(ou(dim=2, m0=np.array([1.0, -0.5]), v0=np.array([0.5, 2.0])))
    x = np.array([0.3, 0.7])
    num = np.array(
        [(marg.log_density(x + d, 0.4) - marg.log_density(x - d, 0.4)) / 2e-6 for d in np.eye(2) * 1e-6]
    )
    assert_allclose(marg.score(x, 0.4), num, atol=1e-8)


def test_stability_guard():
    with pytest.raises(ValueError):
        ou(n_steps=2).check_stability()
    ou().check_stability()


# ---- Chapman-Kolmogorov


def test_ck_stationary_small_and_decreasing():
    spec = ou()
    res = []
    for h in (1e-2, 1e-3, 1e-4):
        res.append(chapman_kolmogorov_residual(ou_grid(spec, [0.5, 0.5 + h]), spec, 0.5, h))
    assert res[1] < 5e-3
    assert res[0] > res[1] > res[2]


def test_ck_frozen_process_is_exact():
    marg = OuMarginals(ou(m0=1.0, v0=0.5))
    grid = GridDensity.from_function(lambda x, t: marg.density_1d(x, 0.5), [0.2, 0.3])
    assert chapman_kolmogorov_residual(grid, frozen(), 0.2, 0.1) < 1e-12


def test_ck_detects_stale_density():
    spec = ou(m0=1.0, v0=0.5)
    marg = OuMarginals(spec)
    t, h = 0.5, 1e-2
    # claim the density did not move: residual must be of order h |dp/dt|
    grid = GridDensity.from_function(lambda x, _: marg.density_1d(x, t), [t, t + h])
    x = grid.x
    dpdt = (marg.density_1d(x, t + 1e-5) - marg.density_1d(x, t - 1e-5)) / 2e-5
    assert chapman_kolmogorov_residual(grid, spec, t, h) > 0.5 * h * np.max(np.abs(dpdt))


def test_ck_needs_grid_knots():
    spec = ou()
    grid = ou_grid(spec, [0.5, 0.51])
    with pytest.raises(ValueError):
        chapman_kolmogorov_residual(grid, spec, 0.5, 0.02)


# ---- Fokker-Planck


def fp(spec, m, dt, t=0.5):
    return fokker_planck_residual(ou_grid(spec, [t - dt, t, t + dt], m), spec, t)


def test_fp_residual_and_refinement():
    spec = ou(m0=1.0, v0=0.5)
    coarse = fp(spec, 801, 1e-3)
    fine = fp(spec, 1601, 5e-4)
    assert coarse < 1e-3
    assert 3.0 <= coarse / fine <= 5.0


def test_fp_stationary_needs_fine_grid():
    # dp/dt vanishes, so only the O(dx^2) spatial error is left
    assert fp(ou(), 6001, 1e-3) < 1e-6


def test_fp_detects_wrong_drift():
    spec = ou(m0=1.0, v0=0.5)
    wrong = SdeSpec(drift=lambda x, t: -2 * np.asarray(x, float), diffusion=lambda t: math.sqrt(2.0))
    grid = ou_grid(spec, [0.499, 0.5, 0.501])
    assert fokker_planck_residual(grid, wrong, 0.5) > 0.1


def test_fp_needs_neighbouring_knots():
    spec = ou()
    with pytest.raises(ValueError):
        fokker_planck_residual(ou_grid(spec, [0.5, 0.501]), spec, 0.5)


# ---- detailed-balance limit


def test_db_limit_true_score_vanishes():
    spec = ou(m0=1.0, v0=0.5)
    marg = OuMarginals(spec)
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = rng.uniform(0, 0.99)
        x, eps = rng.standard_normal(1), rng.standard_normal(1)
        r, lim = db_limit_residual(spec, marg.score, x, t, eps, 1e-4, marg)
        assert lim == 0.0
        assert abs(r) < 5e-2


@pytest.mark.parametrize("c", [0.3, -1.0])
def test_db_limit_shifted_score(c):
    spec = ou(m0=1.0, v0=0.5)
    marg = OuMarginals(spec)

    def score(x, t):
        return marg.score(x, t) + c

    r, lim = db_limit_residual(spec, score, np.array([0.2]), 0.4, np.array([1.0]), 1e-6, marg)
    assert_allclose(lim, c, atol=1e-14)
    assert abs(r - c) < 1e-2
    _, lim0 = db_limit_residual(spec, score, np.array([0.2]), 0.4, np.array([0.0]), 1e-6, marg)
    assert lim0 == 0.0


def test_db_limit_gap_shrinks_with_h():
    spec = ou(m0=1.0, v0=0.5)
    model = ScoreModel.constant(-0.5, 0.3)
    x, eps = np.array([0.7]), np.array([-1.3])
    gaps = [abs(np.subtract(*db_limit_residual(spec, model, x, 0.3, eps, h))) for h in (1e-2, 1e-3, 1e-4)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_db_limit_two_dimensional():
    spec = ou(dim=2, m0=np.array([1.0, 0.0]), v0=np.array([0.5, 1.5]))
    marg = OuMarginals(spec)
    shift = np.array([0.2, -0.4])
    eps = np.array([0.5, 1.0])
    r, lim = db_limit_residual(spec, lambda x, t: marg.score(x, t) + shift, np.array([0.1, -0.3]), 0.6, eps, 1e-6)
    assert_allclose(lim, eps @ shift, atol=1e-14)
    assert abs(r - lim) < 1e-2


# ---- sliced score matching


def test_ssm_zero_score_has_zero_loss():
    x = np.random.default_rng(0).standard_normal((1000, 1))
    value, grads = ssm_loss(ScoreModel.constant(0.0, 0.0), x, 0.5, seed=0)
    assert value == 0.0
    assert_allclose(grads["b"], 0.0, atol=1e-15)


def test_ssm_population_minimum_at_true_score():
    x = np.random.default_rng(1).standard_normal((1_000_000, 1))
    losses = {}
    for a in (-1.5, -1.0, -0.5):
        for b in (-0.5, 0.0, 0.5):
            losses[(a, b)] = ssm_loss(ScoreModel.constant(a, b), x, 0.0, seed=2)[0]
    assert min(losses, key=losses.get) == (-1.0, 0.0)
    # closed form for N(0, 1): a + (a^2 + b^2) / 2
    assert_allclose(losses[(-1.0, 0.0)], -0.5, atol=1e-2)


def test_ssm_gradient_matches_finite_differences():
    x = np.random.default_rng(3).standard_normal((500, 2))
    model = ScoreModel(np.array([0.0, 1.0]), [[-0.7, -1.2], [-0.9, -0.4]], [[0.1, 0.0], [-0.2, 0.3]])
    t = 0.3
    _, grads = ssm_loss(model, x, t, seed=4)
    for name in ("a", "b"):
        base = getattr(model, name)
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for d in (1e-6, -1e-6):
                p = {"a": model.a.copy(), "b": model.b.copy()}
                p[name][idx] += d
                vals.append(ssm_loss(ScoreModel(model.knots, p["a"], p["b"]), x, t, seed=4)[0])
            fd[idx] = (vals[0] - vals[1]) / 2e-6
        assert_allclose(grads[name], fd, atol=1e-7)


def test_fit_affine_score_recovers_ou_score():
    rng = np.random.default_rng(5)
    samples = {t: rng.standard_normal((100_000, 1)) for t in (0.0, 0.5, 1.0)}
    model = fit_affine_score(samples, seed=6)
    assert np.max(np.abs(model.a + 1.0)) < 0.05
    assert np.max(np.abs(model.b)) < 0.05


def test_fit_affine_score_nonstationary():
    spec = ou(m0=1.0, v0=0.5)
    rng = np.random.default_rng(7)
    samples = {}
    for t in (0.0, 1.0):
        m, v = ou_marginal(spec, t)
        samples[t] = m + math.sqrt(v) * rng.standard_normal((200_000, 1))
    model = fit_affine_score(samples, seed=8)
    for i, t in enumerate((0.0, 1.0)):
        m, v = ou_marginal(spec, t)
        assert abs(model.a[i, 0] + 1 / v) < 0.1
        assert abs(model.b[i, 0] - m / v) < 0.1


def test_score_model_interpolates_between_knots():
    model = ScoreModel(np.array([0.0, 1.0]), [[-1.0], [-3.0]], [[0.0], [2.0]])
    a, b = model.coefficients(0.25)
    assert_allclose([a[0], b[0]], [-1.5, 0.5])
    assert_allclose(model.coefficients(2.0)[0], [-3.0])
    assert_allclose(model(np.array([2.0]), 0.5), [-4.0 + 1.0])


# ---- reverse sampler


def test_reverse_sampler_true_score_marginals():
    spec = ou(m0=1.0, v0=0.5)
    marg = OuMarginals(spec)
    out = reverse_sampler(spec, marg.score, 100_000, seed=0, record=(0.0, 0.5))
    for t in (0.0, 0.5):
        m, v = ou_marginal(spec, t)
        xs = out[t][:, 0]
        assert stats.kstest(xs, stats.norm(float(m), math.sqrt(float(v))).cdf).statistic < 0.01
        assert abs(xs.mean() - m) < 3 * math.sqrt(v / len(xs)) + 0.02
        assert abs(xs.var() - v) < 3 * v * math.sqrt(2 / len(xs)) + 0.02


def test_reverse_sampler_full_chunks_are_stable():
    spec = ou(n_steps=50)
    score = ScoreModel.constant(-1.0, 0.0)
    a = reverse_sampler(spec, score, CHUNK, seed=3, record=(0.0,))[0.0]
    b = reverse_sampler(spec, score, CHUNK + 17, seed=3, record=(0.0,))[0.0]
    assert_allclose(a, b[:CHUNK], rtol=0, atol=0)
    c = reverse_sampler(spec, score, CHUNK, seed=4, record=(0.0,))[0.0]
    assert not np.allclose(a, c)


def test_reverse_without_noise_undoes_forward_drift():
    spec = SdeSpec(drift=lambda x, t: -np.asarray(x, float), diffusion=lambda t: 0.0, init_var=1.0)
    fwd = forward_sampler(spec, 100, seed=0, record=(0.0, 1.0))
    back = reverse_sampler(spec, lambda x, t: np.zeros_like(x), 100, seed=1, record=(0.0,), x1=fwd[1.0])
    # per step (1 - h)(1 + h) = 1 - h^2, so the round trip is off by about n h^2
    assert_allclose(back[0.0], fwd[0.0], rtol=2e-3)


# ---- grids


def test_grid_density_validation():
    x = np.linspace(-6, 6, 801)
    good = np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    GridDensity(x, [0.0], good)
    with pytest.raises(ValueError):
        GridDensity(x ** 3, [0.0], good)
    with pytest.raises(ValueError):
        GridDensity(x, [0.0], good - 1e-3)
    with pytest.raises(ValueError):
        GridDensity(x, [0.0], 2 * good)
    with pytest.raises(ValueError):
        GridDensity(x, [0.0], good).knot(0.1)
