"""Text/JSON/CSV formats: DAG files, oracle exports, traces."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dag import DagEnv, DagError


def parse_dag(text: str) -> DagEnv:
    """Parse the line-oriented DAG format.

    ``parent child`` declares an edge, ``terminal <id> <reward>`` a terminal
    and ``initial <id>`` the initial state. ``#`` starts a comment.
    """
    edges, reward, initial = [], {}, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "initial" and len(tok) == 2:
            if initial is not None:
                raise DagError(f"line {lineno}: initial state declared twice")
            initial = tok[1]
        elif tok[0] == "terminal" and len(tok) == 3:
            try:
                reward[tok[1]] = float(tok[2])
            except ValueError:
                raise DagError(f"line {lineno}: bad reward {tok[2]!r}") from None
        elif len(tok) == 2:
            edges.append((tok[0], tok[1]))
        else:
            raise DagError(f"line {lineno}: cannot parse {raw!r}")
    if initial is None:
        raise DagError("no 'initial' line")
    return DagEnv.from_labeled(edges, initial, reward)


def load_dag(path: str | Path) -> DagEnv:
    return parse_dag(Path(path).read_text(encoding="utf-8"))


def format_dag(env: DagEnv) -> str:
    lab = [str(env.label(s)).replace(" ", "") for s in range(env.n_states)]
    lines = [f"initial {lab[env.initial]}"]
    lines += [f"{lab[s]} {lab[t]}" for s, t in env.edges]
    lines += [f"terminal {lab[x]} {env.reward[x]!r}" for x in env.terminals]
    return "\n".join(lines) + "\n"


def flows_to_json(env: DagEnv, flows) -> dict:
    lab = [str(env.label(s)) for s in range(env.n_states)]
    return {
        "state_flow": {lab[s]: float(v) for s, v in enumerate(flows.state_flow)},
        "edge_flow": {
            f"{lab[s]}->{lab[t]}": float(flows.edge_flow[i]) for i, (s, t) in enumerate(env.edges)
        },
        "partition": float(flows.partition),
        "terminal_dist": {lab[x]: float(p) for x, p in zip(env.terminals, flows.terminal_dist)},
    }


def _clean(obj):
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def dump_json(obj, path: str | Path) -> None:
    """Deterministic JSON: sorted keys, repr floats, non-finite as strings."""
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])


def read_samples(path: str | Path, labels: Sequence[str]) -> np.ndarray:
    """Empirical distribution over ``labels`` from a newline-delimited sample file."""
    index = {str(l): i for i, l in enumerate(labels)}
    counts = np.zeros(len(labels))
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        tok = raw.strip()
        if not tok or tok.startswith("#"):
            continue
        if tok not in index:
            raise ValueError(f"line {lineno}: unknown terminal label {tok!r}")
        counts[index[tok]] += 1
    if counts.sum() == 0:
        raise ValueError("sample file contains no samples")
    return counts / counts.sum()
