from __future__ import annotations

from typing import Dict, List, Optional, TypedDict

SCHEMA_VERSION = 1

SUBCOMMANDS: List[str] = [
    "sample-fbm",
    "lift",
    "solve-rde",
    "center-manifold",
    "verify-invariance",
    "gap-check",
    "cocycle-check",
]

# Top-level keys accepted in an experiment config file
CONFIG_FIELDS: List[str] = [
    "schema_version",
    "system",
    "inline_system",
    "diffusion_scale",
    "hurst",
    "dim",
    "seeds",
    "horizon",
    "steps_per_unit",
    "n",
    "levy_level",
    "alpha",
    "solver",
    "lp",
    "xi",
    "t",
    "tau",
    "steps",
    "matrix",
    "mode",
    "cs",
    "beta_margin",
    "chart",
    "out_dir",
]

SOLVER_FIELDS: List[str] = ["max_iter", "tolerance", "subintervals", "drift_rule"]

LP_FIELDS: List[str] = [
    "window",
    "tail_depth",
    "eta",
    "tol",
    "max_iter",
    "truncate",
    "drift_rule",
    "probe_scale",
    "samples",
    "sample_radius",
    "invariance_tol",
    "cocycle_tol",
]

STATUS_PASS = "pass"
STATUS_FAIL = "fail"


def path_columns(dim: int) -> List[str]:
    """Stable column order for path CSVs: t, v1..vd."""
    return ["t"] + [f"v{k + 1}" for k in range(dim)]


class ConstantsRecord(TypedDict, total=False):
    C_S: float
    K: float
    K_closed_form: float
    R: List[float]
    Mc: float
    Ms: float
    gamma: float
    beta: float
    eta: float


class RunRecord(TypedDict, total=False):
    schema_version: int
    subcommand: str
    status: str
    config_hash: str
    system: Optional[str]
    seeds: List[int]
    constants: ConstantsRecord
    diagnostics: Dict[str, object]
    artifacts: List[str]


def base_record(subcommand: str, config_hash: str) -> RunRecord:
    return {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "status": STATUS_PASS,
        "config_hash": config_hash,
        "system": None,
        "seeds": [],
        "constants": {},
        "diagnostics": {},
        "artifacts": [],
    }
