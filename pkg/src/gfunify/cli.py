"""Command line runner: ``gfunify run|list|validate``.

A run is described by a YAML config::

    schema_version: 1
    experiment: flows
    seed: 0
    env: diamond.dag        # relative to the config file, else a bundled file
    optimizer: {lr: 0.01}
    params: {steps: 5000}

and writes results.json, trace.csv and resolved-config.json into the output
directory. Exit codes: 0 all checks pass, 1 invalid config or failed run
(nothing written), 2 at least one threshold check failed.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .experiments import EXPERIMENTS, LOADERS, OptimizerModel, bundled
from .io import dump_json, write_csv

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_THRESHOLD = 0, 1, 2

ExperimentName = Literal[tuple(EXPERIMENTS)]  # type: ignore[valid-type]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1]
    experiment: ExperimentName
    seed: int
    out: Optional[str] = None
    env: Optional[str] = None
    spec: Optional[str] = None
    data: Optional[str] = None
    optimizer: OptimizerModel = OptimizerModel()
    params: dict = {}


class ConfigError(Exception):
    def __init__(self, source: str, messages: list[str]):
        super().__init__("\n".join(f"{source}:{m}" for m in messages))
        self.messages = messages


@dataclass
class Resolved:
    config: RunConfig
    params: object
    inputs: dict
    input_names: dict
    optimizer: object


def _key_lines(text: str) -> dict[tuple, int]:
    """Map every mapping key path in a YAML document to its 1-based line."""
    lines: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            seen = set()
            for k, v in node.value:
                key = k.value
                if key in seen:
                    raise ConfigError("", [f"{k.start_mark.line + 1}: duplicate key {key!r}"])
                seen.add(key)
                lines[path + (key,)] = k.start_mark.line + 1
                walk(v, path + (key,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                lines[path + (str(i),)] = v.start_mark.line + 1
                walk(v, path + (str(i),))

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return lines


def _format_errors(err: ValidationError, lines: dict, prefix: tuple = ()) -> list[str]:
    out = []
    for e in err.errors():
        loc = prefix + tuple(str(p) for p in e["loc"])
        line = next((lines[loc[:i]] for i in range(len(loc), 0, -1) if loc[:i] in lines), None)
        where = f"{line}: " if line else " "
        out.append(f"{where}{'.'.join(loc) or '<root>'}: {e['msg']}")
    return out


def _resolve_input(value: str, base: Path) -> Path | None:
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if p.is_file():
        return p
    b = bundled(value)
    return b if b.is_file() else None


def resolve(raw: dict, source: str = "<config>", lines: dict | None = None, base: Path | None = None) -> Resolved:
    """Validate a config mapping and load its inputs; raises ConfigError."""
    lines = lines or {}
    base = base or Path.cwd()
    if not isinstance(raw, dict):
        raise ConfigError(source, ["1: config must be a mapping"])
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(source, _format_errors(err, lines)) from None
    exp = EXPERIMENTS[cfg.experiment]
    try:
        params = exp.params.model_validate(cfg.params)
    except ValidationError as err:
        raise ConfigError(source, _format_errors(err, lines, ("params",))) from None
    problems, inputs, names = [], {}, {}
    for key in ("env", "spec", "data"):
        value = getattr(cfg, key)
        line = lines.get((key,))
        where = f"{line}: " if line else " "
        if value is not None and key not in exp.inputs:
            problems.append(f"{where}{key}: not used by experiment {cfg.experiment!r}")
            continue
        if value is None:
            value = exp.inputs.get(key)
            if value is None:
                continue
        path = _resolve_input(value, base)
        if path is None:
            problems.append(f"{where}{key}: file not found: {value!r}")
            continue
        try:
            inputs[key] = LOADERS[key](path)
        except Exception as err:  # malformed inputs are config errors
            problems.append(f"{where}{key}: cannot load {value!r}: {err}")
            continue
        names[key] = value
    cap = os.environ.get("GFU_ENUM_CAP")
    if cap is not None and not (cap.isdigit() and int(cap) > 0):
        problems.append(f" GFU_ENUM_CAP: must be a positive integer, got {cap!r}")
    if problems:
        raise ConfigError(source, problems)
    opt = cfg.optimizer
    if "lr" not in cfg.optimizer.model_fields_set:
        opt = opt.model_copy(update={"lr": exp.default_lr})
    return Resolved(cfg, params, inputs, names, opt)


def load_config(path: str | Path, seed: int | None = None) -> Resolved:
    path = Path(path)
    source = str(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(source, [f" cannot read: {err.strerror}"]) from None
    try:
        lines = _key_lines(text)
        raw = yaml.safe_load(text)
    except ConfigError as err:
        raise ConfigError(source, err.messages) from None
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = f"{mark.line + 1}: " if mark else " "
        raise ConfigError(source, [f"{line}YAML syntax error: {getattr(err, 'problem', err)}"]) from None
    if isinstance(raw, dict) and seed is not None:
        raw["seed"] = seed
    return resolve(raw if raw is not None else {}, source, lines, path.parent)


def resolved_json(res: Resolved) -> dict:
    cfg = res.config
    return {
        "schema_version": cfg.schema_version,
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "inputs": dict(res.input_names),
        "optimizer": res.optimizer.model_dump(),
        "params": res.params.model_dump(),
    }


def execute(res: Resolved, out: Path) -> tuple[int, str]:
    """Run one resolved config, write its files, return (exit code, summary)."""
    cfg = res.config
    exp = EXPERIMENTS[cfg.experiment]
    try:
        outcome = exp.run(res.params, res.inputs, cfg.seed, res.optimizer.spec())
    except Exception as err:
        return EXIT_INVALID, f"{cfg.experiment}: run failed: {type(err).__name__}: {err}"
    first_name, first = next(iter(outcome.checks.items()))
    results = {
        "experiment": cfg.experiment,
        "claim": exp.claim,
        "paper_ref": exp.reference,
        "seed": cfg.seed,
        "metric": first_name,
        "value": first.value,
        "threshold": first.to_json()["threshold"],
        "comparison": first.op,
        "pass": outcome.passed,
        "checks": {k: c.to_json() for k, c in outcome.checks.items()},
    }
    clash = set(results) & set(outcome.fields)
    if clash:
        raise RuntimeError(f"result fields collide with summary keys: {sorted(clash)}")
    results.update(outcome.fields)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(results, out / "results.json")
    dump_json(resolved_json(res), out / "resolved-config.json")
    write_csv(out / "trace.csv", outcome.trace_header, outcome.trace_rows)
    failed = [k for k, c in outcome.checks.items() if not c.passed]
    status = "PASS" if not failed else "FAIL (" + ", ".join(failed) + ")"
    code = EXIT_OK if not failed else EXIT_THRESHOLD
    return code, f"{cfg.experiment}: {status} -> {out}"


def _worker(job: tuple) -> tuple[int, str]:
    path, raw, seed, out = job
    res = load_config(path, seed) if path is not None else resolve(raw)
    return execute(res, Path(out))


def _cmd_list(args) -> int:
    width = max(map(len, EXPERIMENTS))
    for name, exp in EXPERIMENTS.items():
        print(f"{name:<{width}}  {exp.reference}  |  {exp.claim}")
    return EXIT_OK


def _jobs_from_args(args) -> list[tuple]:
    """(config path or None, raw mapping or None, seed override, out dir) per run."""
    if args.experiment and args.config:
        raise ConfigError("<command line>", [" give an experiment name or --config files, not both"])
    if args.experiment:
        raw = {"schema_version": SCHEMA_VERSION, "experiment": args.experiment}
        if args.seed is not None:
            raw["seed"] = args.seed
        return [(None, raw, None, args.out or f"runs/{args.experiment}")]
    if not args.config:
        raise ConfigError("<command line>", [" nothing to run: give an experiment name or --config"])
    jobs = []
    for path in args.config:
        if args.out and len(args.config) > 1:
            out = str(Path(args.out) / Path(path).stem)
        else:
            out = args.out
        jobs.append((path, None, args.seed, out))
    return jobs


def _validate_jobs(jobs) -> list[tuple]:
    """Validate every job up front; returns jobs with output dirs filled in."""
    errors, ready = [], []
    for path, raw, seed, out in jobs:
        try:
            res = load_config(path, seed) if path is not None else resolve(raw, "<command line>")
        except ConfigError as err:
            errors.append(str(err))
            continue
        out = out or res.config.out or f"runs/{Path(path).stem}"
        ready.append((path, raw, seed, out))
    if errors:
        raise ConfigError("", [e for e in errors])
    return ready


def _cmd_run(args) -> int:
    try:
        jobs = _validate_jobs(_jobs_from_args(args))
    except ConfigError as err:
        print(_strip(err), file=sys.stderr)
        return EXIT_INVALID
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_worker, jobs))
    else:
        outcomes = [_worker(j) for j in jobs]
    for code, line in outcomes:
        print(line, file=sys.stdout if code != EXIT_INVALID else sys.stderr)
    return max(code for code, _ in outcomes)


def _cmd_validate(args) -> int:
    try:
        jobs = _validate_jobs(_jobs_from_args(args))
    except ConfigError as err:
        print(_strip(err), file=sys.stderr)
        return EXIT_INVALID
    for path, raw, _, _ in jobs:
        print(f"{path or raw['experiment']}: ok")
    return EXIT_OK


def _strip(err: ConfigError) -> str:
    return "\n".join(line.lstrip(":") for line in str(err).splitlines())


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for failed checks here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gfunify", description="Run GFlowNet unification experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("run", "run experiments"), ("validate", "check configs without running")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("experiment", nargs="?", choices=list(EXPERIMENTS), help="run with default settings")
        p.add_argument("--config", "-c", action="append", default=[], help="YAML config (repeatable)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (a parent directory for several configs)")
        p.add_argument("--jobs", "-j", type=int, default=1, help="parallel processes for several configs")
    sub.add_parser("list", help="list experiments")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        return _cmd_list(args)
    if args.jobs < 1:
        print("--jobs must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_validate(args)


if __name__ == "__main__":
    sys.exit(main())
