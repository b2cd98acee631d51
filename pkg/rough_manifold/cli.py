from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

from . import config
from .errors import ConfigError, RoughManifoldError
from .io import read_json
from .run import ExperimentConfig, merge_overrides, run
from .schemas import STATUS_FAIL, SUBCOMMANDS, RunRecord


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Rough-noise center manifolds: sample fBm, lift it, solve RDEs and build charts."
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="Experiment config JSON")
        cmd.add_argument("--out", help="Run directory for artifacts")
        cmd.add_argument("--seed", type=int, help="Single noise seed")
        cmd.add_argument("--seeds", type=_int_list, help="Comma-separated noise seeds")
        cmd.add_argument(
            "--mesh",
            type=float,
            help="Grid step; 1/mesh must be a power of two. sample-fbm writes 1/mesh + 1 rows, t = 0 included",
        )
        cmd.add_argument("--levy-level", type=int, help="Dyadic level for the Levy-area lift")
        cmd.add_argument("--window", type=int, help="Number of past fibers in the LP map")
        cmd.add_argument("--tail-depth", type=int, help="Truncation depth of the stable series")
        cmd.add_argument("--tol", type=float, help="LP fixed-point tolerance")
        cmd.add_argument("--system", help="Registry system name")
        cmd.add_argument("--hurst", type=float, help="Hurst parameter in (1/3, 1/2]")
        cmd.add_argument("--dim", type=int, help="Noise dimension")
        cmd.add_argument("--horizon", type=int, help="Two-sided noise horizon L")
        cmd.add_argument("--matrix", help="Linear part A as .json (nested list) or .csv")
        cmd.add_argument("--mode", choices=["dichotomy", "trichotomy"], help="Spectral split mode")
        cmd.add_argument("--cs", type=float, help="Override the semigroup constant C_S")
        cmd.add_argument(
            "--beta-margin",
            type=float,
            help=f"Stable rate kept below the spectral gap (default {config.BETA_MARGIN}); "
            "A = diag(0, -1) with --cs 1 gives K = 0.01388 only with --beta-margin 0",
        )
        cmd.add_argument("--chart", help="chart.json of an earlier center-manifold run")
        cmd.add_argument("--steps", type=int, help="Unit steps for the invariance check")
        cmd.add_argument("--xi", type=_float_list, help="Comma-separated initial state")
        cmd.add_argument("--t", type=float, help="Solve horizon / cocycle time t")
        cmd.add_argument("--tau", type=float, help="Cocycle shift tau")
    return parser


def load_matrix(path: str) -> List[List[float]]:
    if Path(path).suffix.lower() == ".csv":
        matrix = pd.read_csv(path, header=None).to_numpy(dtype=float)
    else:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
        matrix = np.asarray(data["A"] if isinstance(data, dict) else data, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigError(f"{path}: matrix must be square, got shape {matrix.shape}")
    return matrix.tolist()


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    seeds = args.seeds if args.seeds is not None else ([args.seed] if args.seed is not None else None)
    steps_per_unit = None
    if args.mesh is not None:
        if args.mesh <= 0:
            raise ConfigError("--mesh must be positive")
        steps_per_unit = int(round(1.0 / args.mesh))
    lp = {k: v for k, v in (("window", args.window), ("tail_depth", args.tail_depth), ("tol", args.tol)) if v is not None}
    return {
        "seeds": seeds,
        "steps_per_unit": steps_per_unit,
        "n": steps_per_unit,
        "levy_level": args.levy_level,
        "system": args.system,
        "hurst": args.hurst,
        "dim": args.dim,
        "horizon": args.horizon,
        "matrix": load_matrix(args.matrix) if args.matrix else None,
        "mode": args.mode,
        "cs": args.cs,
        "beta_margin": args.beta_margin,
        "chart": args.chart,
        "steps": args.steps,
        "xi": args.xi,
        "t": args.t,
        "tau": args.tau,
        "lp": lp or None,
        "out_dir": args.out,
    }


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """File config (or the config embedded in --chart), then flag overrides."""
    base: Dict[str, Any] = {}
    if args.chart:
        base = dict(read_json(args.chart).get("config") or {})
        base.pop("out_dir", None)
    if args.config:
        base = merge_overrides(base, read_json(args.config))
    return ExperimentConfig.from_dict(merge_overrides(base, _overrides(args)))


def _print_summary(record: RunRecord) -> None:
    print(f"=== {record['subcommand']} summary ===")
    print(f"status: {record['status']}")
    print(f"config hash: {record['config_hash']}")
    if record.get("system"):
        print(f"system: {record['system']}")
    print(f"seeds: {record.get('seeds')}")
    for key, value in sorted(record.get("constants", {}).items()):
        print(f"{key}: {value}")
    for key, value in sorted(record.get("diagnostics", {}).items()):
        if isinstance(value, (int, float, str)) or (isinstance(value, list) and len(value) <= 8):
            print(f"{key}: {value}")
    print(f"artifacts: {', '.join(record.get('artifacts', []))}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    logging.basicConfig(
        level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args)
        record = run(args.subcommand, cfg)
    except (RoughManifoldError, OSError) as exc:
        print(f"[error] {args.subcommand}: {exc}", file=sys.stderr)
        return 1

    _print_summary(record)
    return 2 if record["status"] == STATUS_FAIL else 0


if __name__ == "__main__":
    raise SystemExit(main())
