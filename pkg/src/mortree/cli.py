"""Experiment driver: ``mortree run | eval | compare | show-defaults``.

Configuration is a flat ``key = value`` file (INI syntax, an optional
``[run]`` header). ``mortree show-defaults`` prints every key with its
default value.

Exit codes: 0 converged, 2 usage/configuration error, 3 build finished but
did not converge, 4 algorithm failure, 5 stale or missing artifacts and
out-of-domain parameters.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import fem1d, problems
from .hilbert_rb import TruthModel
from .problems import ConfigurationError, TrainingSpec
from .tree_library import (
    DomainError,
    HilbertBackend,
    LibraryTree,
    WassersteinBackend,
    evaluate_library,
    library_summary,
    m_based_split,
    plain_tree,
    y_cart_split,
)

log = logging.getLogger("mortree")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_FAILURE = 4
EXIT_STALE = 5

PROBLEMS = ("diff1", "diff2", "cvdiff", "kdv")
ALGORITHMS = ("plain", "ycart", "mbased")

_DEFAULT_TRAINING = {
    "diff1": ("grid", "50,50"),
    "diff2": ("grid", "50,50"),
    "cvdiff": ("grid", "1001"),
    "kdv": ("random", "500"),
}


class StaleArtifactError(RuntimeError):
    """Artifacts were produced with a different configuration."""


@dataclass(frozen=True)
class RunConfig:
    problem: str = "diff1"
    alpha: float = 1.0
    y_max: float = 10000.0
    mesh_cells: int = 1024
    kdv_x_lo: float = -2.0
    kdv_x_hi: float = 4.0
    kdv_grid: int = 4096
    quantile_nodes: int = 2048
    training: str = "auto"
    training_size: str = "auto"
    training_seed: int = 0
    algorithm: str = "plain"
    tol: float = 1e-6
    n_max: int | None = None
    rule: str = "best"
    extra_steps: int | None = None
    seed: int = 0
    max_depth: int = 12
    output: str = "out"

    _HELP = {
        "problem": "diff1 | diff2 | cvdiff | kdv",
        "alpha": "Diff-1 coefficient scaling (coercive for alpha > 4/(4 pi^2 - 1))",
        "y_max": "Cv-Diff upper velocity",
        "mesh_cells": "uniform cells of the truth mesh on (0, 1)",
        "kdv_x_lo": "left end of the KdV spatial window",
        "kdv_x_hi": "right end of the KdV spatial window",
        "kdv_grid": "KdV grid cells",
        "quantile_nodes": "midpoint quantile nodes S",
        "training": "auto | grid | random",
        "training_size": "grid counts per direction (comma list) or sample count; auto = desk defaults",
        "training_seed": "seed of random training sets",
        "algorithm": "plain | ycart | mbased",
        "tol": "target accuracy",
        "n_max": "maximal space dimension (ycart; optional cap for plain)",
        "rule": "ycart split rule: best | alternate",
        "extra_steps": "mbased restarted greedy steps per split (default 2, 3 for kdv)",
        "seed": "seed of the random first snapshot",
        "max_depth": "depth guard of tree builds",
        "output": "output directory",
    }

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigurationError(f"unknown problem {self.problem!r}; choose from {', '.join(PROBLEMS)}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        if not (self.tol > 0 and math.isfinite(self.tol)):
            raise ConfigurationError("tol must be positive")
        if self.algorithm == "ycart" and self.n_max is None:
            raise ConfigurationError("ycart needs n_max")
        if self.n_max is not None and self.n_max < 1:
            raise ConfigurationError("n_max must be positive")
        if self.rule not in ("best", "alternate"):
            raise ConfigurationError("rule must be best or alternate")
        if self.extra_steps is not None and self.extra_steps < 2:
            raise ConfigurationError("extra_steps must be at least 2")
        if self.max_depth < 1:
            raise ConfigurationError("max_depth must be positive")
        if self.training not in ("auto", "grid", "random"):
            raise ConfigurationError("training must be auto, grid or random")
        if self.problem == "kdv" and self.training == "grid":
            raise ConfigurationError("kdv uses random training sets")
        if self.mesh_cells < 2:
            raise ConfigurationError("mesh_cells must be at least 2")

    # -- parsing ------------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls) if not f.name.startswith("_")}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().lower().replace("-", "_")
            if key not in known:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            kwargs[key] = _coerce(key, raw, known[key].default)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        values = {}
        for section in parser.sections():
            values.update(parser[section])
        return cls.from_mapping(values)

    # -- derived settings ---------------------------------------------------

    def canonical(self) -> dict:
        """Settings that define the results (the output directory is excluded)."""
        d = asdict(self)
        d.pop("output")
        d["training"], d["training_size"] = self.training_setup()
        d["extra_steps"] = self.effective_extra_steps()
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def training_setup(self) -> tuple[str, str]:
        mode, size = _DEFAULT_TRAINING[self.problem]
        if self.training != "auto":
            mode = self.training
        if self.training_size != "auto":
            size = self.training_size
        return mode, size

    def training_spec(self) -> TrainingSpec:
        mode, size = self.training_setup()
        try:
            counts = tuple(int(c) for c in size.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"bad training_size {size!r}") from exc
        if mode == "grid":
            if self.problem in ("diff1", "diff2") and len(counts) == 1:
                counts = counts * 2
            return TrainingSpec("grid", counts=counts)
        return TrainingSpec("random", n=counts[0], seed=self.training_seed)

    def effective_extra_steps(self) -> int:
        if self.extra_steps is not None:
            return self.extra_steps
        return 3 if self.problem == "kdv" else 2

    def build_problem(self):
        if self.problem == "kdv":
            return problems.get_problem("kdv", x_lo=self.kdv_x_lo, x_hi=self.kdv_x_hi, num_points=self.kdv_grid)
        return problems.get_problem(self.problem, alpha=self.alpha, y_max=self.y_max)

    @classmethod
    def defaults_text(cls) -> str:
        lines = ["[run]"]
        for f in fields(cls):
            if f.name.startswith("_"):
                continue
            default = "" if f.default is None else f.default
            lines.append(f"# {cls._HELP[f.name]}")
            lines.append(f"{f.name} = {default}")
        return "\n".join(lines) + "\n"


def _coerce(key, raw, default):
    raw = str(raw).strip()
    if key in ("n_max", "extra_steps"):
        return None if raw.lower() in ("", "none", "inf") else _to_int(key, raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return _to_int(key, raw)
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{key} expects a number, got {raw!r}") from exc
    return raw


def _to_int(key, raw):
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{key} expects an integer, got {raw!r}") from exc


# --- serialization -----------------------------------------------------------


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps17(obj, indent: int = 1, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps17(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps17(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + dumps17(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj) if math.isfinite(obj) else "null"
    if obj is None:
        return "null"
    return json.dumps(str(obj))


# --- run ---------------------------------------------------------------------


def build_backend(config: RunConfig, points: np.ndarray):
    problem = config.build_problem()
    if config.problem == "kdv":
        return WassersteinBackend(problem, points, config.quantile_nodes)
    return HilbertBackend(TruthModel(problem, fem1d.build_mesh(config.mesh_cells), points))


def build_tree(config: RunConfig, backend, box) -> LibraryTree:
    if config.algorithm == "plain":
        return plain_tree(backend, config.tol, config.n_max, config.seed)
    if config.algorithm == "ycart":
        return y_cart_split(
            backend, box, config.tol, config.n_max, rule=config.rule, max_depth=config.max_depth, seed=config.seed
        )
    return m_based_split(
        backend, config.tol, extra_steps=config.effective_extra_steps(), max_depth=config.max_depth, seed=config.seed
    )


def _notes(config: RunConfig) -> list[str]:
    notes = []
    if config.algorithm == "mbased":
        notes.append("leaf map: nearest training parameter in box-normalized distance (lowest index on ties)")
    if config.algorithm == "mbased" and config.problem == "cvdiff":
        notes.append(
            "reference figures for cvdiff/mbased disagree (42 vs 24 spaces, 111 vs 61 snapshots); "
            "compare with wide intervals"
        )
    return notes


def run(config: RunConfig) -> tuple[dict, int]:
    """Build the library described by ``config`` and write all artifacts."""
    start = time.perf_counter()
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    problem = config.build_problem()
    training = problems.make_training_set(problem.box, config.training_spec())
    points = training.points
    summary: dict = {}
    code = EXIT_OK
    try:
        backend = build_backend(config, points)
        tree = build_tree(config, backend, problem.box)
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        log.error("algorithm failure: %s", exc)
        summary = {
            "status": "failure",
            "error": f"{type(exc).__name__}: {exc}",
            "problem": config.problem,
            "algorithm": config.algorithm,
            "config_hash": config.config_hash(),
            "runtime_s": time.perf_counter() - start,
        }
        (out / "summary.json").write_text(dumps17(summary) + "\n")
        return summary, EXIT_FAILURE

    tree.check_partition(len(points))
    _write_convergence(out / "convergence.csv", tree, points)
    (out / "tree.json").write_text(dumps17(tree.to_dict()) + "\n")
    (out / "tree.dot").write_text(tree.to_dot())
    _write_partition(out / "partition.csv", tree, points)

    summary = library_summary(tree)
    summary.update(
        {
            "status": "converged" if tree.converged else "not converged",
            "problem": config.problem,
            "alpha": config.alpha if config.problem == "diff1" else None,
            "num_training": len(points),
            "training": training.provenance,
            "seed": config.seed,
            "rng": problems.RNG_NAME,
            "config": config.canonical(),
            "config_hash": config.config_hash(),
            "failures": tree.failures,
            "build_log": tree.build_log,
            "notes": _notes(config),
            "runtime_s": time.perf_counter() - start,
        }
    )
    (out / "summary.json").write_text(dumps17(summary) + "\n")
    if not tree.converged:
        code = EXIT_NOT_CONVERGED
    return summary, code


def _write_convergence(path: Path, tree: LibraryTree, points: np.ndarray) -> None:
    p = points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "max_error", "selected_index"] + [f"y{i + 1}" for i in range(p)])
        if tree.algorithm == "plain":
            history = tree.params["history"]
            selected = tree.root.generators
            offset = len(selected) - len(history)
            for i, e in enumerate(history):
                s = selected[offset + i]
                w.writerow([offset + i + 1, format_float(e), s] + [format_float(v) for v in points[s]])
        else:
            for row in tree.build_log:
                w.writerow([row["level"], format_float(row["max_error"]), ""] + [""] * p)


def _write_partition(path: Path, tree: LibraryTree, points: np.ndarray) -> None:
    owner = tree.leaf_of_training()
    if sorted(owner) != list(range(len(points))):
        raise AssertionError("partition does not cover the training set")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["training_index"] + [f"y{i + 1}" for i in range(points.shape[1])] + ["leaf"])
        for i in range(len(points)):
            w.writerow([i] + [format_float(v) for v in points[i]] + [owner[i]])


# --- eval --------------------------------------------------------------------


def load_run(config: RunConfig, run_dir) -> LibraryTree:
    run_dir = Path(run_dir)
    summary_path, tree_path = run_dir / "summary.json", run_dir / "tree.json"
    if not summary_path.exists() or not tree_path.exists():
        raise StaleArtifactError(f"{run_dir} holds no completed run")
    summary = json.loads(summary_path.read_text())
    if summary.get("config_hash") != config.config_hash():
        raise StaleArtifactError(
            f"{run_dir} was built with config hash {summary.get('config_hash')}, not {config.config_hash()}"
        )
    return LibraryTree.from_dict(json.loads(tree_path.read_text()))


def evaluate(config: RunConfig, run_dir, y, diagnostics: bool = False) -> dict:
    tree = load_run(config, run_dir)
    problem = config.build_problem()
    y = np.asarray(y, dtype=float)
    if y.shape != (problem.box.dim,):
        raise ConfigurationError(f"expected {problem.box.dim} parameter values, got {y.size}")
    if not problem.box.contains(y):
        raise DomainError(f"parameter {y.tolist()} lies outside the box")
    training = problems.make_training_set(problem.box, config.training_spec())
    backend = build_backend(config, training.points)
    record = evaluate_library(tree, y, backend, problem.box, diagnostics)
    record["y"] = y.tolist()
    return record


# --- compare -----------------------------------------------------------------

COMPARE_COLUMNS = [
    "run",
    "problem",
    "alpha",
    "algorithm",
    "num_spaces",
    "dimensions",
    "counts",
    "num_snapshots",
    "tol",
    "n_max",
    "converged",
    "runtime_s",
    "warning",
]


def compare(run_dirs, output=None) -> list[dict]:
    rows = []
    for d in run_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise StaleArtifactError(f"missing run: {path}")
        s = json.loads(path.read_text())
        rows.append(
            {
                "run": str(d),
                "problem": s.get("problem"),
                "alpha": s.get("alpha"),
                "algorithm": s.get("algorithm"),
                "num_spaces": s.get("num_spaces"),
                "dimensions": " ".join(str(v) for v in s.get("dimensions", [])),
                "counts": " ".join(str(v) for v in s.get("counts", [])),
                "num_snapshots": s.get("num_snapshots"),
                "tol": s.get("tol"),
                "n_max": s.get("n_max"),
                "converged": s.get("converged"),
                "runtime_s": s.get("runtime_s"),
                "warning": "",
            }
        )
    if rows:
        ref = (rows[0]["problem"], rows[0]["alpha"])
        for r in rows:
            if (r["problem"], r["alpha"]) != ref:
                r["warning"] = "problem differs from first run"
    if output is not None:
        with open(output, "w", newline="") as fh:
            w = csv.DictWriter(fh, COMPARE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return rows


# --- entry point -------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mortree", description="Tree-based libraries of reduced spaces.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="build a library and write its artifacts")
    r.add_argument("config", nargs="?", help="configuration file")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")

    e = sub.add_parser("eval", help="evaluate a built library at one parameter")
    e.add_argument("config", nargs="?", help="configuration file")
    e.add_argument("--run-dir", help="directory of the run (default: the config's output)")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.add_argument("--y", required=True, help="comma-separated parameter values")
    e.add_argument("--diagnostics", action="store_true", help="also compare with the truth solution")

    c = sub.add_parser("compare", help="merge the summaries of several runs")
    c.add_argument("runs", nargs="+", help="run directories")
    c.add_argument("-o", "--output", default="compare.csv")

    sub.add_parser("show-defaults", help="print all settings with their defaults")
    return ap


def _load_config(path, overrides) -> RunConfig:
    values = {}
    if path:
        if not Path(path).exists():
            raise ConfigurationError(f"no such configuration file: {path}")
        base = RunConfig.from_file(path)
        values = {k: ("" if v is None else v) for k, v in asdict(base).items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return RunConfig.from_mapping(values)


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "show-defaults":
            sys.stdout.write(RunConfig.defaults_text())
            return EXIT_OK
        if args.command == "compare":
            rows = compare(args.runs, args.output)
            print(f"{len(rows)} run(s) written to {args.output}")
            return EXIT_OK
        config = _load_config(args.config, args.set)
        if args.command == "run":
            summary, code = run(config)
            print(
                f"{summary.get('status')}: {summary.get('num_spaces')} space(s), dims {summary.get('dimensions')}, "
                f"{summary.get('num_snapshots')} snapshot(s) -> {config.output}"
            )
            return code
        try:
            y = [float(v) for v in args.y.split(",")]
        except ValueError as exc:
            raise ConfigurationError(f"--y expects comma-separated numbers, got {args.y!r}") from exc
        record = evaluate(config, args.run_dir or config.output, y, args.diagnostics)
        print(dumps17(record))
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StaleArtifactError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STALE


if __name__ == "__main__":
    sys.exit(main())
