"""Small enumerable environments used by tests and experiments."""

from __future__ import annotations

import itertools

import numpy as np

from .dag import DagEnv


def chain(length: int = 2, reward: float = 1.0) -> DagEnv:
    """s0 -> 1 -> ... -> length, the last state terminal."""
    edges = [(i, i + 1) for i in range(length)]
    return DagEnv(length + 1, 0, tuple(edges), {length: reward}, labels=tuple(range(length + 1)))


def diamond(r1: float = 1.0, r2: float = 3.0) -> DagEnv:
    """s0->A, s0->B, A->X1, A->X2, B->X2 with R(X1)=r1, R(X2)=r2."""
    return DagEnv.from_labeled(
        [("s0", "A"), ("s0", "B"), ("A", "X1"), ("A", "X2"), ("B", "X2")],
        "s0",
        {"X1": r1, "X2": r2},
    )


def hypercube(n_bits: int, reward) -> DagEnv:
    """Fill ``n_bits`` binary slots in any order.

    States are tuples over {0, 1, None}; the initial state has every slot
    empty and terminals are complete bit-strings. ``reward`` is a callable on
    bit tuples or a mapping from bit tuples to positive values.
    """
    get = reward if callable(reward) else reward.__getitem__
    edges = []
    for state in itertools.product((None, 0, 1), repeat=n_bits):
        for i, v in enumerate(state):
            if v is None:
                for b in (0, 1):
                    edges.append((state, state[:i] + (b,) + state[i + 1 :]))
    full = list(itertools.product((0, 1), repeat=n_bits))
    return DagEnv.from_labeled(edges, (None,) * n_bits, {x: float(get(x)) for x in full})


def bit_tree(n_bits: int, reward) -> DagEnv:
    """Prefix tree over bit-strings; every terminal has a unique trajectory."""
    get = reward if callable(reward) else reward.__getitem__
    edges = []
    for t in range(n_bits):
        for prefix in itertools.product((0, 1), repeat=t):
            for b in (0, 1):
                edges.append((prefix, prefix + (b,)))
    full = list(itertools.product((0, 1), repeat=n_bits))
    return DagEnv.from_labeled(edges, (), {x: float(get(x)) for x in full})


def two_mode_target(n_terminals: int = 16, mode_mass: float = 0.4, modes=(0, 9)) -> np.ndarray:
    """Two terminals carry ``mode_mass`` each, the rest share the remainder."""
    p = np.full(n_terminals, (1.0 - 2 * mode_mass) / (n_terminals - 2))
    p[list(modes)] = mode_mass
    return p


def bundled_envs() -> dict[str, DagEnv]:
    """The three reference environments used for training checks."""
    return {
        "diamond": diamond(),
        "bit_tree3": bit_tree(3, lambda x: 1.0 + 2 * x[0] + x[1] + 0.5 * x[2]),
        "hypercube3": hypercube(3, lambda x: 0.5 + sum(x) ** 2),
    }
