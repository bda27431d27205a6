"""Command-line front end.

Subcommands::

    enki run CONFIG [--out DIR]
    enki compare-distributions CONFIG [--seeds N] [--jobs K] [--out DIR]
    enki sweep-gamma CONFIG --gammas G [G ...] [--seeds N] [--jobs K] [--out DIR]

CONFIG is a JSON file with a ``problem`` and a ``solver`` section; see
``CONFIG_SCHEMA``. A ``manifest.json`` written by ``run`` is accepted in
place of a config and reproduces the original run. The ``ENKI_SEED``
environment variable overrides the configured seed.
"""

from __future__ import annotations

import argparse
import csv
import inspect
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema

from . import __version__
from .core import EnkiError
from .problems import PROBLEMS, get_problem
from .solver import SolverConfig, Status, run

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EARLY_STOPPED = 2
EXIT_MAX_ITERATIONS = 3

STATUS_EXIT = {
    Status.CONVERGED: EXIT_OK,
    Status.EARLY_STOPPED: EXIT_EARLY_STOPPED,
    Status.MAX_ITERATIONS: EXIT_MAX_ITERATIONS,
}

DISTRIBUTIONS = ("off", "uniform", "gaussian", "laplace")

_number = {"type": "number"}
_vector = {"type": "array", "items": _number, "minItems": 1}
_matrix = {"type": "array", "items": _vector, "minItems": 1}
_scalar_or_vector = {"oneOf": [_number, _vector]}
_any_shape = {"oneOf": [_number, _vector, _matrix]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem"],
    "properties": {
        "problem": {
            "type": "object",
            "required": ["name"],
            "properties": {
                "name": {"enum": sorted(PROBLEMS)},
                "gamma": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, _matrix]},
                "y_bar": _scalar_or_vector,
                "init_mean": _scalar_or_vector,
                "init_cov": _any_shape,
                "F": _any_shape,
                "H": _any_shape,
            },
            "allOf": [
                {
                    "if": {"properties": {"name": {"const": "gaussian_bumps"}}},
                    "then": {
                        "propertyNames": {
                            "enum": ["name", "gamma", "y_bar", "init_mean", "init_cov"]
                        }
                    },
                },
                {
                    "if": {"properties": {"name": {"const": "linear"}}},
                    "then": {
                        "propertyNames": {
                            "enum": ["name", "gamma", "y_bar", "init_mean", "init_cov", "F", "H"]
                        }
                    },
                },
            ],
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_members": {"type": "integer", "minimum": 2},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "resampling": {"enum": list(DISTRIBUTIONS)},
                "rank_tol": {"type": "number", "minimum": 0},
                "fixed_perturbations": {"type": "boolean"},
                "perturb_observations": {"type": "boolean"},
                "update_only": {"type": "boolean"},
                "covariance_divisor": {"enum": ["population", "sample"]},
                "stagnation_window": {"type": "integer", "minimum": 2},
                "stagnation_gain_eps": {"type": "number", "minimum": 0},
            },
        },
    },
}


class ConfigError(EnkiError):
    pass


def _field_path(error: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in error.absolute_path)
    return path or "<root>"


def validate_config(cfg) -> None:
    """Raise :class:`ConfigError` naming the offending field."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"invalid config at {_field_path(err)}: {err.message}")


def load_config(path) -> dict:
    """Read a config (or a run manifest), validate it and apply ``ENKI_SEED``."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if isinstance(cfg, dict) and "config_echo" in cfg:
        cfg = cfg["config_echo"]
    validate_config(cfg)
    cfg.setdefault("solver", {})
    seed = os.environ.get("ENKI_SEED")
    if seed is not None:
        try:
            cfg["solver"]["seed"] = int(seed)
        except ValueError:
            raise ConfigError(f"ENKI_SEED must be an integer, got {seed!r}") from None
        validate_config(cfg)
    return cfg


def resolve_config(cfg: dict) -> dict:
    """Fill every default so the echo fully determines the run."""
    problem = dict(cfg["problem"])
    factory = PROBLEMS[problem["name"]]
    for name, param in inspect.signature(factory).parameters.items():
        if name not in problem and param.default is not inspect.Parameter.empty:
            default = param.default
            problem[name] = list(default) if isinstance(default, tuple) else default
    solver = build_solver_config(cfg.get("solver", {})).to_dict()
    return {"problem": problem, "solver": solver}


def build_problem(problem_cfg: dict):
    params = {k: v for k, v in problem_cfg.items() if k != "name"}
    try:
        return get_problem(problem_cfg["name"], **params)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config at problem: {exc}") from None


def build_solver_config(solver_cfg: dict) -> SolverConfig:
    try:
        return SolverConfig.from_dict(solver_cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config at solver: {exc}") from None


def _fmt(v) -> str:
    if isinstance(v, (bool, str)) or v is None:
        return "" if v is None else str(v)
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_trace(path: Path, trace) -> None:
    write_csv(path, trace[0].csv_header(), (r.csv_row() for r in trace))


def cmd_run(config_path, out_dir=".") -> int:
    t0 = time.perf_counter()
    cfg = resolve_config(load_config(config_path))
    problem = build_problem(cfg["problem"])
    config = build_solver_config(cfg["solver"])
    result = run(problem, config)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("trace.csv", "summary.json", "manifest.json")}
    write_trace(paths["trace.csv"], result.trace)
    write_json(paths["summary.json"], result.summary())
    write_json(
        paths["manifest.json"],
        {
            "command": "run",
            "version": __version__,
            "master_seed": config.seed,
            "config_echo": cfg,
            "artifacts": {k: str(v) for k, v in paths.items()},
            "wall_clock_seconds": time.perf_counter() - t0,
        },
    )
    print(f"{result.status.value} after {result.iterations} iterations, "
          f"innovation {result.final_innovation:.3e}")
    return STATUS_EXIT[result.status]


def _run_row(job):
    """Worker: run one (problem, solver) pair and return summary fields."""
    problem_cfg, solver_cfg = job
    result = run(build_problem(problem_cfg), build_solver_config(solver_cfg))
    ss = result.steady_state
    return {
        "status": result.status.value,
        "iterations": result.iterations,
        "final_innovation": result.final_innovation,
        "fixed_point": result.fixed_point,
        "oscillation_norm": ss.oscillation_norm,
        "prior_error_norm": ss.prior_error_norm,
        "post_error_norm": ss.post_error_norm,
        "identity_residual": ss.identity_residual,
    }


def run_jobs(jobs_list, jobs: int = 1):
    """Run sweep members, concurrently when ``jobs > 1``; results keep input order."""
    if jobs <= 1 or len(jobs_list) <= 1:
        return [_run_row(j) for j in jobs_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_row, jobs_list))


def cmd_compare_distributions(config_path, seeds: int = 20, jobs: int = 1, out_dir=".") -> int:
    if seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    cfg = resolve_config(load_config(config_path))
    master = cfg["solver"]["seed"]
    jobs_list, keys = [], []
    for dist in DISTRIBUTIONS:
        for i in range(seeds):
            solver = dict(cfg["solver"], resampling=dist, seed=master + i)
            jobs_list.append((cfg["problem"], solver))
            keys.append((dist, master + i))
    rows = run_jobs(jobs_list, jobs)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(
        out / "compare.csv",
        ["distribution", "seed", "status", "iterations", "final_innovation"],
        ([d, s, r["status"], r["iterations"], r["final_innovation"]]
         for (d, s), r in zip(keys, rows)),
    )
    summary = {"seeds": seeds, "master_seed": master, "median_iterations": {}, "converged": {}}
    for dist in DISTRIBUTIONS:
        its = [r["iterations"] for (d, _), r in zip(keys, rows) if d == dist]
        conv = [r for (d, _), r in zip(keys, rows) if d == dist
                and r["status"] == Status.CONVERGED.value]
        summary["median_iterations"][dist] = statistics.median(its)
        summary["converged"][dist] = len(conv)
    write_json(out / "compare_summary.json", summary)
    for dist in DISTRIBUTIONS:
        print(f"{dist:>8}: median {summary['median_iterations'][dist]} iterations, "
              f"{summary['converged'][dist]}/{seeds} converged")
    return EXIT_OK


def cmd_sweep_gamma(config_path, gammas, seeds: int = 1, jobs: int = 1, out_dir=".") -> int:
    if not gammas:
        raise ConfigError("--gammas needs at least one value")
    if any(not g > 0 for g in gammas):
        raise ConfigError("every gamma must be positive")
    if seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    cfg = resolve_config(load_config(config_path))
    master = cfg["solver"]["seed"]
    jobs_list, keys = [], []
    for g in gammas:
        for i in range(seeds):
            problem = dict(cfg["problem"], gamma=g)
            solver = dict(cfg["solver"], resampling="off", seed=master + i)
            jobs_list.append((problem, solver))
            keys.append((g, master + i))
    rows = run_jobs(jobs_list, jobs)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["status", "iterations", "fixed_point", "oscillation_norm", "post_error_norm",
            "prior_error_norm", "identity_residual"]
    write_csv(
        out / "gamma_sweep.csv",
        ["gamma", "seed"] + cols,
        ([g, s] + [r[c] for c in cols] for (g, s), r in zip(keys, rows)),
    )
    for (g, s), r in zip(keys, rows):
        print(f"gamma {g:g} seed {s}: oscillation {r['oscillation_norm']:.3e}, "
              f"post error {r['post_error_norm']:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enki", description="Iterative ensemble Kalman inversion runs and sweeps."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one inversion and write trace, summary and manifest")
    p.add_argument("config", help="JSON config or a manifest.json from an earlier run")
    p.add_argument("--out", default=".", help="output directory (default: current)")

    p = sub.add_parser("compare-distributions",
                       help="compare resampling distributions over several seeds")
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=".")

    p = sub.add_parser("sweep-gamma", help="steady-state output quantities per noise level")
    p.add_argument("config")
    p.add_argument("--gammas", type=float, nargs="+", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=".")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "compare-distributions":
            return cmd_compare_distributions(args.config, args.seeds, args.jobs, args.out)
        return cmd_sweep_gamma(args.config, args.gammas, args.seeds, args.jobs, args.out)
    except (EnkiError, OSError, ValueError) as exc:
        print(f"enki: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
