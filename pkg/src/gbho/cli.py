"""Experiment runner: YAML configs, method x seed matrices, tables and plot data.

Config schema (YAML)::

    problem:
      kind: analytic | ridge | mnist_subset | digits_subset
      n: 1000              # examples drawn for train + valid (subset and ridge kinds)
      n_test: 1000         # held-out test examples
      hp_count: 1          # 1 or 2 regularization groups
      hidden: 100
      features: 10         # ridge only: synthetic regression inputs
      groups: 1            # optional; must equal hp_count when given
      bounds: [-10, 0]     # per-dimension box, repeated for every dim
      epochs: 60           # lower-level SGD epochs
      check_every: 5
      learning_rate: 0.05
      batch_size: 32
    methods:               # names, or one-key mappings with settings
      - gbho: {n_init: 10, n_al: 5, z: 3, rho0: 2, mul0: 2, eta: 1.5}
      - grid: {points_per_dim: 100}
      - random: {max_llo: 100}
      - bayes: {max_llo: 60, n_warmup: 10}
      - hyperband: {max_resource: 81, eta: 3, counting_mode: runs}
    seeds: [1, 2, 3]
    output_dir: results

Seeds derive the data split (``seed``), model initialization (``seed + 1``)
and search randomness (``seed + 2``). MNIST files are looked up in
``$GBHO_DATA_DIR``.
"""

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import baselines, datasets, optimizer
from .errors import InsufficientData
from .lower_level import LLO_COUNTER, Bounds, ModelSpec, Problem, TrainBudget
from .report import load_report, save_report, write_json_atomic

logger = logging.getLogger(__name__)

METHODS = ("gbho", "grid", "random", "bayes", "hyperband")
PROBLEM_KINDS = ("analytic", "ridge", "mnist_subset", "digits_subset")
DATA_ENV = "GBHO_DATA_DIR"
TABLE_FIELDS = ("method", "problem", "seed", "TRL", "VAL", "TEL", "lambda_star", "llo")


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


# Per-method defaults keyed by hyperparameter count.
PRESETS = {
    "gbho": {1: {"n_init": 10, "n_al": 5}, 2: {"n_init": 25, "n_al": 5}},
    "grid": {1: {"points_per_dim": 100}, 2: {"points_per_dim": 30}},
    "random": {1: {"max_llo": 100}, 2: {"max_llo": 100}},
    "bayes": {1: {"max_llo": 60, "n_warmup": 10}, 2: {"max_llo": 100, "n_warmup": 10}},
    "hyperband": {1: {"max_resource": 81, "eta": 3, "counting_mode": "runs"},
                  2: {"max_resource": 81, "eta": 3, "counting_mode": "runs"}},
}

METHOD_KEYS = {
    "gbho": {"n_init", "n_al", "z", "rho0", "mul0", "eta", "delta", "epsilon", "early_stop",
             "inner_steps", "inner_restarts"},
    "grid": {"points_per_dim"},
    "random": {"max_llo"},
    "bayes": {"max_llo", "n_warmup", "n_probe"},
    "hyperband": {"max_resource", "eta", "counting_mode"},
}

PROBLEM_KEYS = {"kind", "n", "n_test", "hp_count", "hidden", "features", "groups", "bounds", "epochs",
                "check_every", "learning_rate", "batch_size", "activation", "name"}


@dataclass(frozen=True)
class MethodConfig:
    name: str
    settings: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict
    methods: tuple
    seeds: tuple
    output_dir: str

    @property
    def hp_count(self) -> int:
        return self.problem["hp_count"]


def _fail(path, message):
    raise ValidationError(f"{path}: {message}")


def _int(value, path, low=None):
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, f"expected an integer, got {value!r}")
    if low is not None and value < low:
        _fail(path, f"must be >= {low}, got {value}")
    return value


def _num(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"expected a number, got {value!r}")
    return float(value)


def _validate_problem(raw) -> dict:
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict):
        _fail("problem", "expected a mapping or a kind name")
    unknown = set(raw) - PROBLEM_KEYS
    if unknown:
        _fail(f"problem.{sorted(unknown)[0]}", "unknown field")
    kind = raw.get("kind")
    if kind not in PROBLEM_KINDS:
        _fail("problem.kind", f"expected one of {', '.join(PROBLEM_KINDS)}, got {kind!r}")
    p = {
        "kind": kind,
        "n": 1000,
        "n_test": 1000,
        "hp_count": 1,
        "hidden": 100,
        "features": 10,
        "bounds": [-10.0, 0.0],
        "epochs": 60,
        "check_every": 5,
        "learning_rate": 0.05,
        "batch_size": 32,
        "activation": "relu",
    }
    p.update(raw)
    p["hp_count"] = _int(p["hp_count"], "problem.hp_count")
    if p["hp_count"] not in (1, 2):
        _fail("problem.hp_count", f"must be 1 or 2, got {p['hp_count']}")
    if kind == "analytic" and p["hp_count"] != 1:
        _fail("problem.hp_count", "the analytic problem has one hyperparameter")
    if "groups" in raw and _int(raw["groups"], "problem.groups", 1) != p["hp_count"]:
        _fail("problem.groups", f"model has {raw['groups']} regularization group(s), hp_count is {p['hp_count']}")
    for key in ("n", "n_test", "hidden", "features", "epochs", "check_every", "batch_size"):
        p[key] = _int(p[key], f"problem.{key}", 1)
    p["learning_rate"] = _num(p["learning_rate"], "problem.learning_rate")
    if p["activation"] not in ("relu", "tanh"):
        _fail("problem.activation", f"expected relu or tanh, got {p['activation']!r}")
    b = p["bounds"]
    if not (isinstance(b, (list, tuple)) and len(b) == 2):
        _fail("problem.bounds", "expected [low, high]")
    lo, hi = _num(b[0], "problem.bounds[0]"), _num(b[1], "problem.bounds[1]")
    if not lo < hi:
        _fail("problem.bounds", f"low {lo} must be below high {hi}")
    p["bounds"] = [lo, hi]
    p.setdefault("name", f"{kind}-{p['hp_count']}hp")
    return p


def _validate_method(raw, i, hp_count) -> MethodConfig:
    path = f"methods[{i}]"
    if isinstance(raw, str):
        name, settings = raw, {}
    elif isinstance(raw, dict) and len(raw) == 1:
        name, settings = next(iter(raw.items()))
        settings = settings or {}
        path = f"{path}.{name}"
    else:
        _fail(path, "expected a method name or a one-key mapping")
    if name not in METHODS:
        _fail(f"methods[{i}]", f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    if not isinstance(settings, dict):
        _fail(path, "settings must be a mapping")
    unknown = set(settings) - METHOD_KEYS[name]
    if unknown:
        _fail(f"{path}.{sorted(unknown)[0]}", "unknown field")
    merged = dict(PRESETS[name][hp_count])
    if name == "gbho":
        merged.update(z=3.0, rho0=2.0, mul0=2.0, eta=1.5, early_stop=False)
    merged.update(settings)
    for key, value in merged.items():
        if key in ("counting_mode",):
            continue
        if key == "early_stop":
            if not isinstance(value, bool):
                _fail(f"{path}.{key}", "expected true or false")
        elif key in ("z", "rho0", "mul0", "eta", "delta", "epsilon"):
            merged[key] = _num(value, f"{path}.{key}")
        else:
            merged[key] = _int(value, f"{path}.{key}", 0 if key == "n_al" else 1)
    return MethodConfig(name, merged)


def validate_config(raw, base_dir=".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config: top level must be a mapping")
    unknown = set(raw) - {"problem", "methods", "seeds", "output_dir"}
    if unknown:
        _fail(sorted(unknown)[0], "unknown field")
    if "problem" not in raw:
        _fail("problem", "missing")
    problem = _validate_problem(raw["problem"])
    methods = raw.get("methods")
    if not isinstance(methods, list) or not methods:
        _fail("methods", "need at least one method")
    methods = tuple(_validate_method(m, i, problem["hp_count"]) for i, m in enumerate(methods))
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        _fail("methods", "duplicate method name")
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds:
        _fail("seeds", "need at least one seed")
    seeds = tuple(_int(s, f"seeds[{i}]", 0) for i, s in enumerate(seeds))
    out = raw.get("output_dir", "results")
    if not isinstance(out, str):
        _fail("output_dir", "expected a path string")
    out = str(Path(base_dir, out)) if not os.path.isabs(out) else out
    return ExperimentConfig(problem, methods, seeds, out)


def parse_config(path) -> ExperimentConfig:
    """Read and validate a YAML experiment config; relative output paths are
    resolved against the config file's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ParseError(f"{path}: {where}: {getattr(exc, 'problem', None) or exc}") from exc
    return validate_config(raw, base_dir=path.parent)


def build_problem(p: dict, seed: int) -> Problem:
    """Problem instance for one seed (split = seed, init = seed + 1)."""
    bounds = Bounds.box(p["hp_count"], *p["bounds"])
    if p["kind"] == "analytic":
        inst = datasets.synth_quadratic(seed, bounds=(tuple(bounds.low), tuple(bounds.high)))
        return replace(inst.problem, name=p["name"])
    split = datasets.SplitSpec(seed=seed)
    if p["kind"] == "ridge":
        # closed-form lower level, so large search budgets stay cheap
        data, _ = datasets.make_linear_regression(p["n"] + p["n_test"], p["features"], seed, noise=0.5)
        test = data.take(np.arange(p["n"], p["n"] + p["n_test"]))
        train, valid = datasets.subsample_split(data.take(np.arange(p["n"])), p["n"], split)
        spec = ModelSpec.ridge(p["features"], n_groups=p["hp_count"])
        return Problem(spec, train, valid, bounds, test=test, name=p["name"])
    if p["kind"] == "mnist_subset":
        data_dir = os.environ.get(DATA_ENV)
        if not data_dir or not datasets.mnist_available(data_dir):
            raise FileNotFoundError(f"MNIST IDX files not found; set {DATA_ENV}")
        pool = datasets.load_mnist(data_dir, "train")
        test_pool = datasets.load_mnist(data_dir, "test")
        train, valid = datasets.subsample_split(pool, p["n"], split)
        test = test_pool.take(np.random.default_rng(seed).permutation(len(test_pool))[: p["n_test"]])
    else:
        pool = datasets.load_digits_set()
        n_test = min(p["n_test"], len(pool) - p["n"])
        if n_test < 1:
            raise InsufficientData("digits set too small for n + n_test")
        perm = np.random.default_rng(seed).permutation(len(pool))
        test = pool.take(perm[:n_test])
        train, valid = datasets.subsample_split(pool.take(perm[n_test:]), p["n"], split)
    spec = ModelSpec.mlp(train.n_features, p["hidden"], train.n_classes, n_groups=p["hp_count"],
                         activation=p["activation"])
    budget = TrainBudget(max_epochs=p["epochs"], batch_size=p["batch_size"],
                         learning_rate=p["learning_rate"], check_every=p["check_every"], seed=seed + 1)
    return Problem(spec, train, valid, bounds, test=test, budget=budget, name=p["name"])


def run_cell(problem_cfg: dict, method: MethodConfig, seed: int):
    problem = build_problem(problem_cfg, seed)
    search_seed = seed + 2
    s = method.settings
    counter = LLO_COUNTER
    if method.name == "gbho":
        inner = optimizer.InnerSolveConfig()
        if "inner_steps" in s:
            inner = replace(inner, steps=s["inner_steps"])
        if "inner_restarts" in s:
            inner = replace(inner, restarts=s["inner_restarts"])
        cfg = optimizer.GbhoConfig(
            n_init=s["n_init"], n_al=s["n_al"], z=s["z"], rho0=s["rho0"], mul0=s["mul0"], eta=s["eta"],
            delta=s.get("delta"), epsilon=s.get("epsilon"), early_stop=s["early_stop"],
            inner=inner, seed=search_seed,
        )
        report = optimizer.run(problem, cfg, counter, seed=seed)
        if problem.bounds.n_dims == 2 and (s["n_init"], s["n_al"]) == (25, 5):
            report.extra["llo_note"] = ("2HP preset budgets 25 + 5 = 30 LLO; the reference 2HP "
                                        "table lists 50 for GBHO, which this preset does not reproduce")
        return report
    if method.name == "grid":
        n = s["points_per_dim"] ** problem.bounds.n_dims
        report = baselines.grid_search(problem, s["points_per_dim"], baselines.BudgetSpec(n, seed=search_seed), counter)
    elif method.name == "random":
        report = baselines.random_search(problem, baselines.BudgetSpec(s["max_llo"], seed=search_seed), counter)
    elif method.name == "bayes":
        report = baselines.bayes_opt(problem, baselines.BudgetSpec(s["max_llo"], seed=search_seed),
                                     n_warmup=s["n_warmup"], counter=counter, n_probe=s.get("n_probe", 1000))
    else:
        hb = baselines.HyperbandSpec(s["max_resource"], s["eta"], s["counting_mode"])
        runs = baselines.hyperband_runs(hb.max_resource, hb.halving_eta)
        report = baselines.hyperband(problem, hb, baselines.BudgetSpec(runs, seed=search_seed), counter)
    report.seed = seed
    return report


def cell_path(out_dir, method, seed) -> Path:
    return Path(out_dir, "cells", f"{method}__seed{seed}.json")


def _cell_job(args):
    problem_cfg, method, seed, path = args
    try:
        report = run_cell(problem_cfg, method, seed)
        save_report(report, path)
        return method.name, seed, None
    except Exception as exc:  # recorded per cell, never fatal to the matrix
        return method.name, seed, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def table_row(report) -> dict:
    return {
        "method": report.method,
        "problem": report.problem,
        "seed": report.seed,
        "TRL": float(report.train_loss),
        "VAL": float(report.valid_loss),
        "TEL": float(report.test_loss),
        "lambda_star": [float(v) for v in np.atleast_1d(report.lambda_star)],
        "llo": report.llo_count,
    }


def collect_table(out_dir) -> list:
    """Rows from every cell report under ``out_dir``, sorted by method and seed."""
    rows = [table_row(load_report(p)) for p in sorted(Path(out_dir, "cells").glob("*.json"))]
    order = {m: i for i, m in enumerate(METHODS)}
    return sorted(rows, key=lambda r: (order.get(r["method"], len(order)), r["problem"], r["seed"]))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ";".join(_fmt(v) for v in value)
    return str(value)


def write_table(rows, out_dir):
    out_dir = Path(out_dir)
    write_json_atomic(out_dir / "table.json", {"rows": rows})
    tmp = out_dir / ".table.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in TABLE_FIELDS])
    os.replace(tmp, out_dir / "table.csv")


def run_matrix(config: ExperimentConfig, force: bool = False, workers: int = 1, seed_offset: int = 0):
    """Run every (method, seed) cell; returns ``(rows, failures)``.

    Cells whose report file already exists are skipped unless ``force``.
    """
    out = Path(config.output_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    jobs = []
    for method in config.methods:
        for seed in config.seeds:
            seed = seed + seed_offset
            path = cell_path(out, method.name, seed)
            if path.exists() and not force:
                continue
            jobs.append((config.problem, method, seed, str(path)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]
    failures = [{"method": m, "seed": s, "error": e} for m, s, e in results if e is not None]
    for f in failures:
        logger.error("cell %s seed %s failed: %s", f["method"], f["seed"], f["error"].splitlines()[0])
    write_json_atomic(out / "failures.json", {"failures": failures})
    rows = collect_table(out)
    write_table(rows, out)
    return rows, failures


def emit_plots(rows, out_dir, methods=None):
    """Write bar data (mean test loss per method) and LLO-vs-test-loss scatter data."""
    if methods is not None:
        rows = [r for r in rows if r["method"] in set(methods)]
    if not rows:
        raise ValueError("no table rows to plot after filtering")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_method = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(r)
    bars = out_dir / "test_loss_bars.csv"
    with open(bars, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_TEL", "std_TEL", "n"])
        for m, group in by_method.items():
            tel = np.array([g["TEL"] for g in group], dtype=np.float64)
            w.writerow([m, repr(float(tel.mean())), repr(float(tel.std())), len(tel)])
    scatter = out_dir / "llo_vs_test.csv"
    with open(scatter, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "llo", "TEL"])
        for r in rows:
            llo = r["llo"]
            w.writerow([r["method"], r["seed"], repr(float(llo)) if isinstance(llo, float) else llo,
                        repr(float(r["TEL"]))])
    return [bars, scatter]


def format_table(rows) -> str:
    head = f"{'method':<10} {'seed':>5} {'TRL':>10} {'VAL':>10} {'TEL':>10} {'llo':>7}  lambda*"
    lines = [head]
    for r in rows:
        lam = ",".join(f"{v:.3f}" for v in r["lambda_star"])
        llo = r["llo"] if isinstance(r["llo"], int) else f"{r['llo']:.2f}"
        lines.append(f"{r['method']:<10} {r['seed']!s:>5} {r['TRL']:>10.4f} {r['VAL']:>10.4f} "
                     f"{r['TEL']:>10.4f} {llo!s:>7}  {lam}")
    return "\n".join(lines)


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="gbho", description="GBHO benchmark harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a method x seed matrix from a YAML config")
    p_run.add_argument("config")
    p_run.add_argument("--force", action="store_true", help="recompute cells that already have reports")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--seed-offset", type=int, default=0)
    p_table = sub.add_parser("table", help="rebuild and print the aggregate table")
    p_table.add_argument("dir")
    p_plots = sub.add_parser("plots", help="write plot data from a results directory")
    p_plots.add_argument("dir")
    p_plots.add_argument("--methods", nargs="+")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            rows, failures = run_matrix(cfg, force=args.force, workers=args.workers,
                                        seed_offset=args.seed_offset)
            print(format_table(rows))
            if failures:
                print(f"{len(failures)} cell(s) failed; see {Path(cfg.output_dir, 'failures.json')}",
                      file=sys.stderr)
                return 2
            return 0
        if args.command == "table":
            rows = collect_table(args.dir)
            write_table(rows, args.dir)
            print(format_table(rows))
            return 0
        with open(Path(args.dir, "table.json")) as fh:
            rows = json.load(fh)["rows"]
        for path in emit_plots(rows, args.dir, args.methods):
            print(path)
        return 0
    except (ParseError, ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
