import math

import numpy as np
import pytest
from conftest import fd_grad
from numpy.testing import assert_allclose

from gfunify.adapters import (
    AffineCoupling,
    ArSpec,
    ElementwiseAffine,
    HvaeSpec,
    IdentityLayer,
    NfSpec,
    NonInvertible,
    ar_conditionals,
    ar_to_env,
    empirical_conditionals,
    hvae_elbo_direct,
    hvae_log_marginal,
    hvae_to_env,
    nf_log_likelihood_two_ways,
    nf_trajectory,
    spec_from_json,
)
from gfunify.dag import CapExceeded, PolicySet, make_trajectory
from gfunify.objectives import TrajectorySet, kl_tb_loss
from gfunify.oracle import exact_elbo, exact_log_likelihood, terminal_distribution
from gfunify.training import ObjectiveSpec, OptimizerSpec, train


# ---- hierarchical VAE


def test_hvae_single_layer_shape():
    spec = HvaeSpec.random([2], 2, seed=0)
    env, pol = hvae_to_env(spec)
    assert env.n_states == 1 + 2 + 2
    assert env.n_edges == 2 + 4
    assert len(env.terminals) == 2
    assert pol.forward_logits.shape == (6,)


def test_hvae_rejects_unit_cardinality():
    spec = HvaeSpec.random([1, 2], 2, seed=0)
    with pytest.raises(ValueError):
        hvae_to_env(spec)


def test_hvae_shape_mismatch():
    with pytest.raises(ValueError):
        HvaeSpec([2], 2, np.zeros(2), [np.zeros((2, 3))], [np.zeros((2, 2))])


@pytest.mark.parametrize("seed", range(3))
def test_hvae_elbo_matches_direct_sum(seed):
    spec = HvaeSpec.random([2, 3], 2, seed=seed)
    env, pol = hvae_to_env(spec)
    for i, x in enumerate(env.terminals):
        assert_allclose(exact_elbo(env, pol, pol, x), hvae_elbo_direct(spec, i), atol=1e-10)


def test_hvae_marginal_matches_oracle():
    spec = HvaeSpec.random([3, 2], 3, seed=4)
    env, pol = hvae_to_env(spec)
    lik = [exact_log_likelihood(env, pol, x) for x in env.terminals]
    assert_allclose(lik, hvae_log_marginal(spec), atol=1e-12)


def test_exact_posterior_closes_the_gap():
    spec = HvaeSpec.random([2, 3], 2, seed=1).with_exact_posterior()
    env, pol = hvae_to_env(spec)
    for i, x in enumerate(env.terminals):
        assert_allclose(hvae_elbo_direct(spec, i), exact_log_likelihood(env, pol, x), atol=1e-12)


def test_kl_tb_gradient_at_exact_posterior_is_mle_gradient():
    spec = HvaeSpec.random([2, 2], 3, seed=2).with_exact_posterior()
    env, pol = hvae_to_env(spec)
    data = np.array([0.2, 0.5, 0.3])
    rep = kl_tb_loss(env, pol, data, ("forward_logits",), TrajectorySet(env))

    def neg_loglik(p):
        return -sum(d * exact_log_likelihood(env, p, x) for x, d in zip(env.terminals, data))

    assert_allclose(rep.gradient["forward_logits"], fd_grad(neg_loglik, pol, "forward_logits"), atol=1e-6)


def test_hvae_json_round_trip():
    spec = HvaeSpec.random([2, 3], 2, seed=5)
    back = spec_from_json(spec.to_json())
    env_a, pol_a = hvae_to_env(spec)
    env_b, pol_b = hvae_to_env(back)
    assert env_a.edges == env_b.edges
    assert_allclose(pol_a.forward_logits, pol_b.forward_logits, rtol=0, atol=0)
    assert_allclose(pol_a.backward_logits, pol_b.backward_logits, rtol=0, atol=0)


def test_hvae_enumeration_cap(monkeypatch):
    monkeypatch.setenv("GFU_ENUM_CAP", "10")
    with pytest.raises(CapExceeded):
        hvae_to_env(HvaeSpec.random([3, 3], 2, seed=0))


# ---- autoregressive


def test_ar_prefix_tree_shape():
    env, _ = ar_to_env(ArSpec.random(3, (0, 1), seed=0))
    assert env.n_states == 1 + 2 + 4 + 8
    assert len(env.terminals) == 8
    assert env.label(env.initial) == ()


def test_ar_nll_is_trajectory_log_ratio():
    spec = ArSpec.random(3, (0, 1), seed=3)
    env, pol = ar_to_env(spec)
    for path in env.trajectories():
        t = make_trajectory(env, pol, path)
        assert t.log_pb_given_x == 0.0
        assert_allclose(spec.nll(env.label(t.terminal)), -(t.log_pf - t.log_pb_given_x), atol=1e-12)


def test_ar_terminal_distribution_is_product_of_conditionals():
    spec = ArSpec.random(3, ("a", "b", "c"), seed=1)
    env, pol = ar_to_env(spec)
    p = terminal_distribution(env, pol)
    for x in env.terminals:
        assert_allclose(p[env.terminal_index[x]], math.exp(-spec.nll(env.label(x))), rtol=1e-12)
    assert_allclose(p.sum(), 1.0)


def test_ar_bad_logit_length():
    with pytest.raises(ValueError):
        ArSpec(2, (0, 1), {(): [0.0, 1.0, 2.0]})


def test_ar_mle_recovers_empirical_conditionals():
    spec = ArSpec.random(3, (0, 1), seed=7, scale=1.5)
    env, pol = ar_to_env(spec)
    rng = np.random.default_rng(0)
    p = terminal_distribution(env, pol)
    idx = rng.choice(len(p), size=300, p=p)
    samples = [env.label(env.terminals[i]) for i in idx]
    data = np.bincount(idx, minlength=len(p)) / len(idx)
    res = train(env, PolicySet.uniform(env), ObjectiveSpec("MLE", data_dist=data), OptimizerSpec(lr=0.05), steps=3000)
    fitted = ar_conditionals(env, res.policy)
    for prefix, cond in empirical_conditionals(samples, (0, 1)).items():
        assert np.max(np.abs(fitted[prefix] - cond)) < 0.01


def test_empirical_conditionals_counts():
    emp = empirical_conditionals([(0, 1), (0, 0), (1, 1), (0, 1)], (0, 1))
    assert_allclose(emp[()], [0.75, 0.25])
    assert_allclose(emp[(0,)], [1 / 3, 2 / 3])
    assert_allclose(emp[(1,)], [0.0, 1.0])


def test_ar_json_round_trip():
    spec = ArSpec.random(2, (0, 1, 2), seed=2)
    back = spec_from_json(spec.to_json())
    for k, v in spec.conditional_logits.items():
        assert_allclose(back.conditional_logits[k], v, rtol=0, atol=0)


def test_ar_enumeration_cap(monkeypatch):
    monkeypatch.setenv("GFU_ENUM_CAP", "100")
    with pytest.raises(CapExceeded):
        ar_to_env(ArSpec.random(7, (0, 1), seed=0))


# ---- normalizing flows


def test_identity_layers_give_base_density():
    spec = NfSpec(2, [IdentityLayer(), IdentityLayer()])
    x = np.array([[0.3, -1.2], [0.0, 0.0]])
    cov, traj = nf_log_likelihood_two_ways(spec, x)
    base = -0.5 * (x * x).sum(axis=1) - math.log(2 * math.pi)
    assert_allclose(cov, base, atol=1e-15)
    assert_allclose(traj, base, atol=1e-15)


def test_doubling_map_in_one_dimension():
    spec = NfSpec(1, [ElementwiseAffine([math.log(2.0)], [0.0])])
    x = np.linspace(-3, 3, 7)[:, None]
    cov, traj = nf_log_likelihood_two_ways(spec, x)
    ref = -0.5 * (x[:, 0] / 2) ** 2 - 0.5 * math.log(2 * math.pi) - math.log(2.0)
    assert_allclose(cov, ref, atol=1e-14)
    assert_allclose(traj, ref, atol=1e-14)


@pytest.mark.parametrize("dim,layers", [(2, 3), (3, 4), (5, 2)])
def test_coupling_stack_two_ways_agree(dim, layers):
    spec = NfSpec.coupling_stack(dim, layers, seed=dim)
    x = spec.sample(100, seed=1)
    cov, traj = nf_log_likelihood_two_ways(spec, x)
    assert np.max(np.abs(cov - traj)) < 1e-9
    states = nf_trajectory(spec, x)
    assert len(states) == layers + 1
    assert np.max(np.abs(states[-1] - x)) < 1e-8


def test_coupling_log_det_matches_numerical_jacobian():
    layer = NfSpec.coupling_stack(3, 1, seed=0).layers[0]
    z = np.array([0.4, -0.7, 1.1])
    jac = np.zeros((3, 3))
    for i in range(3):
        dz = np.zeros(3)
        dz[i] = 1e-6
        jac[:, i] = (layer.forward(z + dz) - layer.forward(z - dz)) / 2e-6
    assert_allclose(layer.log_det_forward(z), np.log(abs(np.linalg.det(jac))), atol=1e-8)


class _Leaky(IdentityLayer):
    """Inverse that is off by a constant: not actually invertible."""

    def inverse(self, y):
        return np.asarray(y, float) + 1e-3


def test_non_invertible_detected():
    spec = NfSpec(1, [_Leaky()])
    with pytest.raises(NonInvertible):
        nf_trajectory(spec, np.array([[0.5]]))


def test_nf_json_round_trip():
    spec = NfSpec.coupling_stack(2, 3, seed=0)
    spec.layers.append(ElementwiseAffine([0.1, -0.2], [1.0, 0.0]))
    back = spec_from_json(spec.to_json())
    x = spec.sample(10, seed=3)
    assert_allclose(nf_log_likelihood_two_ways(back, x)[0], nf_log_likelihood_two_ways(spec, x)[0], rtol=0, atol=0)
    assert isinstance(back.layers[0], AffineCoupling)


def test_unknown_spec_kind():
    with pytest.raises(ValueError):
        spec_from_json({"kind": "vae"})


def test_direct_elbo_uses_every_configuration():
    # with identical encoder rows the ELBO is a plain average over latents
    spec = HvaeSpec([2], 2, np.zeros(2), [np.array([[0.0, 1.0], [1.0, 0.0]])], [np.zeros((2, 2))])
    lp = math.log(0.5)
    dec = np.log(np.exp([[0.0, 1.0], [1.0, 0.0]]) / np.exp([[0.0, 1.0], [1.0, 0.0]]).sum(1, keepdims=True))
    for x in range(2):
        ref = sum(0.5 * (lp + dec[z, x] - lp) for z in range(2))
        assert_allclose(hvae_elbo_direct(spec, x), ref, atol=1e-14)
