"""Model families expressed as GFlowNets on enumerable DAGs.

* bottom-up hierarchical VAEs with discrete latents: decoder = forward
  policy, encoder = backward policy;
* autoregressive models with natural ordering: prefix tree, Dirac backward;
* normalizing flows: one stochastic base draw followed by deterministic
  invertible steps.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

from .dag import CapExceeded, DagEnv, PolicySet, enum_cap, make_rng


class NonInvertible(ValueError):
    pass


# --------------------------------------------------------------------------
# hierarchical VAE


@dataclass
class HvaeSpec:
    """Discrete bottom-up HVAE; ``x`` is the layer after the last latent.

    ``decoder_logits[i]`` has shape (|Z_{i+1}|, |Z_{i+2}|) (rows condition,
    columns are the next layer, the last one being x).
    ``encoder_logits[i]`` has shape (|Z_{i+2}|, |Z_{i+1}|) and defines
    q(z_{i+1} | z_{i+2}).
    """

    latent_cardinalities: list[int]
    data_cardinality: int
    prior_logits: np.ndarray
    decoder_logits: list[np.ndarray]
    encoder_logits: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.latent_cardinalities)

    @property
    def cards(self) -> list[int]:
        return list(self.latent_cardinalities) + [self.data_cardinality]

    def __post_init__(self):
        cards = self.cards
        self.prior_logits = np.asarray(self.prior_logits, dtype=float)
        self.decoder_logits = [np.asarray(a, dtype=float) for a in self.decoder_logits]
        self.encoder_logits = [np.asarray(a, dtype=float) for a in self.encoder_logits]
        if self.prior_logits.shape != (cards[0],):
            raise ValueError("prior_logits shape mismatch")
        for i in range(self.n_layers):
            if self.decoder_logits[i].shape != (cards[i], cards[i + 1]):
                raise ValueError(f"decoder_logits[{i}] shape mismatch")
            if self.encoder_logits[i].shape != (cards[i + 1], cards[i]):
                raise ValueError(f"encoder_logits[{i}] shape mismatch")

    @classmethod
    def random(cls, latent_cardinalities: Sequence[int], data_cardinality: int, seed: int, scale: float = 1.0):
        rng = make_rng(seed)
        cards = list(latent_cardinalities) + [data_cardinality]
        return cls(
            list(latent_cardinalities),
            data_cardinality,
            scale * rng.standard_normal(cards[0]),
            [scale * rng.standard_normal((cards[i], cards[i + 1])) for i in range(len(cards) - 1)],
            [scale * rng.standard_normal((cards[i + 1], cards[i])) for i in range(len(cards) - 1)],
        )

    def to_json(self) -> dict:
        return {
            "kind": "hvae",
            "latent_cardinalities": list(self.latent_cardinalities),
            "data_cardinality": self.data_cardinality,
            "prior_logits": self.prior_logits.tolist(),
            "decoder_logits": [a.tolist() for a in self.decoder_logits],
            "encoder_logits": [a.tolist() for a in self.encoder_logits],
        }

    @classmethod
    def from_json(cls, d: dict) -> "HvaeSpec":
        return cls(
            d["latent_cardinalities"],
            d["data_cardinality"],
            d["prior_logits"],
            d["decoder_logits"],
            d["encoder_logits"],
        )

    def log_joint_terms(self):
        """(log p(z1), [log p(z_{i+1}|z_i)], [log q(z_i|z_{i+1})]) as arrays."""
        return (
            log_softmax(self.prior_logits),
            [log_softmax(a, axis=1) for a in self.decoder_logits],
            [log_softmax(a, axis=1) for a in self.encoder_logits],
        )

    def with_exact_posterior(self) -> "HvaeSpec":
        """Copy whose encoder equals the true posterior of the decoder chain.

        A Markov chain reversed is again Markov, so the posterior factorizes
        as prod_i p(z_i | z_{i+1}) with p(z_i | z_{i+1}) from the marginals.
        """
        lp, dec, _ = self.log_joint_terms()
        marg = [lp]
        for d in dec:
            marg.append(logsumexp(marg[-1][:, None] + d, axis=0))
        enc = []
        for i, d in enumerate(dec):
            joint = marg[i][:, None] + d  # (z_i, z_{i+1})
            enc.append((joint - marg[i + 1][None, :]).T)
        return HvaeSpec(self.latent_cardinalities, self.data_cardinality, self.prior_logits, self.decoder_logits, enc)


def _check_cap(n: int) -> None:
    cap = enum_cap()
    if n > cap:
        raise CapExceeded(f"{n} trajectories exceed the enumeration cap {cap}")


def hvae_to_env(spec: HvaeSpec, data_reward: np.ndarray | None = None) -> tuple[DagEnv, PolicySet]:
    """Layered DAG with one node per (layer, value); terminals are values of x.

    State 0 is the abstract initial state; its edges into layer 1 carry the
    prior. Rewards default to 1 per terminal (only ratios ever matter).
    """
    cards = [1] + spec.cards
    if min(spec.cards) < 2:
        raise ValueError("all cardinalities must be at least 2")
    _check_cap(math.prod(spec.cards))
    offsets = np.cumsum([0] + cards)
    labels = [("s0",)] + [(layer, v) for layer in range(1, len(cards)) for v in range(cards[layer])]
    edges, fwd, bwd = [], [], []
    for v in range(cards[1]):
        edges.append((0, offsets[1] + v))
        fwd.append(spec.prior_logits[v])
        bwd.append(0.0)
    for i in range(spec.n_layers):
        layer = i + 1
        for a in range(cards[layer]):
            for b in range(cards[layer + 1]):
                edges.append((offsets[layer] + a, offsets[layer + 1] + b))
                fwd.append(spec.decoder_logits[i][a, b])
                bwd.append(spec.encoder_logits[i][b, a])
    n = int(offsets[-1])
    x0 = int(offsets[-2])
    rewards = np.ones(spec.data_cardinality) if data_reward is None else np.asarray(data_reward, float)
    env = DagEnv(
        n, 0, tuple((int(s), int(t)) for s, t in edges),
        {x0 + j: float(rewards[j]) for j in range(spec.data_cardinality)},
        labels=tuple(labels),
    )
    policy = PolicySet(np.array(fwd), np.array(bwd), np.zeros(n), 0.0)
    return env, policy


def hvae_elbo_direct(spec: HvaeSpec, x: int) -> float:
    """Textbook ELBO by a direct sum over every latent configuration."""
    lp, dec, enc = spec.log_joint_terms()
    L = spec.n_layers
    total = 0.0
    for zs in itertools.product(*[range(c) for c in spec.latent_cardinalities]):
        z = list(zs) + [x]
        log_q = sum(enc[i][z[i + 1], z[i]] for i in range(L))
        log_p = lp[z[0]] + sum(dec[i][z[i], z[i + 1]] for i in range(L))
        total += math.exp(log_q) * (log_p - log_q)
    return total


def hvae_log_marginal(spec: HvaeSpec) -> np.ndarray:
    """log p(x) for every x by chaining the decoder (no GFlowNet involved)."""
    lp, dec, _ = spec.log_joint_terms()
    m = lp
    for d in dec:
        m = logsumexp(m[:, None] + d, axis=0)
    return m


# --------------------------------------------------------------------------
# autoregressive models


@dataclass
class ArSpec:
    """Tabular AR model; ``conditional_logits[prefix]`` scores the next symbol."""

    seq_len: int
    alphabet: tuple
    conditional_logits: dict[tuple, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.alphabet = tuple(self.alphabet)
        k = len(self.alphabet)
        logits = {}
        for t in range(self.seq_len):
            for prefix in itertools.product(self.alphabet, repeat=t):
                v = self.conditional_logits.get(tuple(prefix), np.zeros(k))
                v = np.asarray(v, dtype=float)
                if v.shape != (k,):
                    raise ValueError(f"logits for prefix {prefix} must have length {k}")
                logits[tuple(prefix)] = v
        self.conditional_logits = logits

    @classmethod
    def random(cls, seq_len: int, alphabet: Sequence, seed: int, scale: float = 1.0) -> "ArSpec":
        rng = make_rng(seed)
        logits = {}
        for t in range(seq_len):
            for prefix in itertools.product(tuple(alphabet), repeat=t):
                logits[prefix] = scale * rng.standard_normal(len(alphabet))
        return cls(seq_len, tuple(alphabet), logits)

    def log_conditional(self, prefix: tuple, symbol) -> float:
        return float(log_softmax(self.conditional_logits[tuple(prefix)])[self.alphabet.index(symbol)])

    def nll(self, x: Sequence) -> float:
        """Sum over positions of -log p(x_{t+1} | x_{1:t})."""
        return -sum(self.log_conditional(tuple(x[:t]), x[t]) for t in range(self.seq_len))

    def to_json(self) -> dict:
        return {
            "kind": "ar",
            "seq_len": self.seq_len,
            "alphabet": list(self.alphabet),
            "conditional_logits": [
                {"prefix": list(p), "logits": v.tolist()} for p, v in self.conditional_logits.items()
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArSpec":
        logits = {tuple(item["prefix"]): item["logits"] for item in d["conditional_logits"]}
        return cls(d["seq_len"], tuple(d["alphabet"]), logits)


def ar_to_env(spec: ArSpec, reward=None) -> tuple[DagEnv, PolicySet]:
    """Prefix tree; state t is the first t symbols, backward is prefix removal."""
    _check_cap(len(spec.alphabet) ** spec.seq_len)
    edges, fwd = [], []
    for t in range(spec.seq_len):
        for prefix in itertools.product(spec.alphabet, repeat=t):
            logits = spec.conditional_logits[prefix]
            for j, a in enumerate(spec.alphabet):
                edges.append((prefix, prefix + (a,)))
                fwd.append(logits[j])
    full = list(itertools.product(spec.alphabet, repeat=spec.seq_len))
    get = (lambda x: 1.0) if reward is None else (reward if callable(reward) else reward.__getitem__)
    env = DagEnv.from_labeled(edges, (), {x: float(get(x)) for x in full})
    # from_labeled numbers edges in insertion order, so logits line up
    policy = PolicySet(np.array(fwd), np.zeros(env.n_edges), np.zeros(env.n_states), 0.0)
    return env, policy


def ar_conditionals(env: DagEnv, policy: PolicySet) -> dict[tuple, np.ndarray]:
    """Next-symbol distribution at every non-terminal prefix of an AR env."""
    p = np.exp(policy.log_pf(env))
    return {env.label(s): p[env.child_edges[s]] for s in range(env.n_states) if not env.is_terminal(s)}


def empirical_conditionals(samples: Sequence[tuple], alphabet: Sequence) -> dict[tuple, np.ndarray]:
    """Closed-form tabular MLE: next-symbol frequencies for every seen prefix."""
    alphabet = tuple(alphabet)
    counts: dict[tuple, np.ndarray] = {}
    for x in samples:
        for t in range(len(x)):
            c = counts.setdefault(tuple(x[:t]), np.zeros(len(alphabet)))
            c[alphabet.index(x[t])] += 1
    return {k: v / v.sum() for k, v in counts.items()}


# --------------------------------------------------------------------------
# normalizing flows


class FlowLayer:
    """Invertible map with separately implemented log|det| of each direction."""

    kind = "base"

    def forward(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inverse(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_det_forward(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_det_inverse(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


class IdentityLayer(FlowLayer):
    kind = "identity"

    def forward(self, z):
        return np.array(z, dtype=float)

    inverse = forward

    def log_det_forward(self, z):
        return np.zeros(np.shape(z)[:-1])

    log_det_inverse = log_det_forward

    def to_json(self):
        return {"kind": self.kind}


class ElementwiseAffine(FlowLayer):
    """y = exp(log_scale) * z + shift."""

    kind = "affine"

    def __init__(self, log_scale, shift):
        self.log_scale = np.asarray(log_scale, dtype=float)
        self.shift = np.asarray(shift, dtype=float)

    def forward(self, z):
        return np.exp(self.log_scale) * z + self.shift

    def inverse(self, y):
        return (y - self.shift) * np.exp(-self.log_scale)

    def log_det_forward(self, z):
        return np.full(np.shape(z)[:-1], self.log_scale.sum())

    def log_det_inverse(self, y):
        # |det| of the inverse map's Jacobian, evaluated from its own diagonal
        return np.full(np.shape(y)[:-1], np.log(np.abs(np.exp(-self.log_scale))).sum())

    def to_json(self):
        return {"kind": self.kind, "log_scale": self.log_scale.tolist(), "shift": self.shift.tolist()}


class AffineCoupling(FlowLayer):
    """Dimensions with ``mask`` pass through and condition an affine map of the rest.

    y_m = z_m;  y_u = z_u * exp(s(z_m)) + t(z_m), with s = tanh(W_s z_m + b_s)
    and t = W_t z_m + b_t.
    """

    kind = "coupling"

    def __init__(self, mask, w_s, b_s, w_t, b_t):
        self.mask = np.asarray(mask, dtype=bool)
        self.w_s, self.b_s = np.asarray(w_s, float), np.asarray(b_s, float)
        self.w_t, self.b_t = np.asarray(w_t, float), np.asarray(b_t, float)

    def _st(self, cond):
        s = np.tanh(cond @ self.w_s.T + self.b_s)
        t = cond @ self.w_t.T + self.b_t
        return s, t

    def forward(self, z):
        z = np.asarray(z, dtype=float)
        y = z.copy()
        s, t = self._st(z[..., self.mask])
        y[..., ~self.mask] = z[..., ~self.mask] * np.exp(s) + t
        return y

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        z = y.copy()
        s, t = self._st(y[..., self.mask])
        z[..., ~self.mask] = (y[..., ~self.mask] - t) * np.exp(-s)
        return z

    def log_det_forward(self, z):
        s, _ = self._st(np.asarray(z, float)[..., self.mask])
        return s.sum(axis=-1)

    def log_det_inverse(self, y):
        s, _ = self._st(np.asarray(y, float)[..., self.mask])
        return np.log(np.prod(np.exp(-s), axis=-1))

    def to_json(self):
        return {
            "kind": self.kind,
            "mask": self.mask.astype(int).tolist(),
            "w_s": self.w_s.tolist(),
            "b_s": self.b_s.tolist(),
            "w_t": self.w_t.tolist(),
            "b_t": self.b_t.tolist(),
        }


_LAYERS = {"identity": IdentityLayer, "affine": ElementwiseAffine, "coupling": AffineCoupling}


def layer_from_json(d: dict) -> FlowLayer:
    d = dict(d)
    cls = _LAYERS[d.pop("kind")]
    return cls(**d)


@dataclass
class NfSpec:
    dim: int
    layers: list[FlowLayer]

    @classmethod
    def coupling_stack(cls, dim: int, n_layers: int, seed: int, scale: float = 0.5) -> "NfSpec":
        """Alternating-mask affine couplings, each followed by nothing else."""
        rng = make_rng(seed)
        layers = []
        for i in range(n_layers):
            mask = (np.arange(dim) % 2) == (i % 2)
            nm, nu = int(mask.sum()), int((~mask).sum())
            layers.append(
                AffineCoupling(
                    mask,
                    scale * rng.standard_normal((nu, nm)),
                    scale * rng.standard_normal(nu),
                    scale * rng.standard_normal((nu, nm)),
                    scale * rng.standard_normal(nu),
                )
            )
        return cls(dim, layers)

    def to_json(self) -> dict:
        return {"kind": "nf", "dim": self.dim, "layers": [l.to_json() for l in self.layers]}

    @classmethod
    def from_json(cls, d: dict) -> "NfSpec":
        return cls(d["dim"], [layer_from_json(l) for l in d["layers"]])

    def sample(self, n: int, seed: int) -> np.ndarray:
        z = make_rng(seed).standard_normal((n, self.dim))
        for layer in self.layers:
            z = layer.forward(z)
        return z


def _log_std_normal(z: np.ndarray) -> np.ndarray:
    return -0.5 * (z * z).sum(axis=-1) - 0.5 * z.shape[-1] * math.log(2 * math.pi)


def nf_trajectory(spec: NfSpec, x: np.ndarray) -> list[np.ndarray]:
    """States (z_1, ..., z_{L+1} = x), with z_1 recovered by inverting every layer.

    The trajectory is then re-played forward from z_1; a mismatch with ``x``
    beyond 1e-8 raises :class:`NonInvertible`.
    """
    z = np.asarray(x, dtype=float)
    for layer in reversed(spec.layers):
        z = layer.inverse(z)
    states = [z]
    for layer in spec.layers:
        states.append(layer.forward(states[-1]))
    err = np.max(np.abs(states[-1] - x)) if np.size(x) else 0.0
    if not err <= 1e-8:
        raise NonInvertible(f"round-trip error {err:.3g} exceeds 1e-8")
    return states


def nf_log_likelihood_two_ways(spec: NfSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Change-of-variables and trajectory-wise log-likelihoods of ``x``.

    The first walks the inverse maps from x down to the base and adds the
    inverse Jacobians. The second scores the forward trajectory: the base
    draw is the only stochastic transition and every deterministic step
    contributes minus its forward log|det|.
    """
    x = np.asarray(x, dtype=float)
    states = nf_trajectory(spec, x)

    y, cov = x, np.zeros(x.shape[:-1])
    for layer in reversed(spec.layers):
        cov = cov + layer.log_det_inverse(y)
        y = layer.inverse(y)
    cov = cov + _log_std_normal(y)

    traj = _log_std_normal(states[0])
    for layer, z in zip(spec.layers, states[:-1]):
        traj = traj - layer.log_det_forward(z)
    return cov, traj


def load_spec(path) -> HvaeSpec | ArSpec | NfSpec:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return spec_from_json(d)


def spec_from_json(d: dict):
    kind = d.get("kind")
    if kind == "hvae":
        return HvaeSpec.from_json(d)
    if kind == "ar":
        return ArSpec.from_json(d)
    if kind == "nf":
        return NfSpec.from_json(d)
    raise ValueError(f"unknown spec kind {kind!r}")
