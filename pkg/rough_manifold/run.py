from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from . import config
from .errors import ConfigError
from .grid_paths import make_uniform_grid
from .io import config_hash, write_json, write_path_csv, write_rough_path_json
from .linear_flow import SPLIT_MODES, LinearPart, Splitting, semigroup_constant, spectral_split
from .lp_manifold import (
    GapConstants,
    LpOptions,
    TemperedRadius,
    center_recovery_error,
    gap_constant,
    lp_fixed_point,
    manifold_graph,
    tangency_check,
    trichotomy_gap_constant,
    verify_invariance,
)
from .rde_solver import SolveOptions, cocycle_check, mild_residual, solve_rde
from .registry import DEFAULT_DIFFUSION_SCALE, SystemSpec, resolve_system
from .rough_lift import (
    FbmSpec,
    RoughPath,
    check_chen,
    default_alpha,
    levy_area_dyadic,
    lift_smooth,
    sample_fbm,
    sample_two_sided,
)
from .schemas import (
    CONFIG_FIELDS,
    LP_FIELDS,
    SCHEMA_VERSION,
    SOLVER_FIELDS,
    STATUS_FAIL,
    STATUS_PASS,
    SUBCOMMANDS,
    RunRecord,
    base_record,
)

logger = logging.getLogger(__name__)

# keys that locate a run rather than describe it
_LOCATION_KEYS = ("out_dir", "chart")

# concatenated subintervals accumulate one Picard tolerance each
RESIDUAL_SLACK = 10.0


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    system: str = "linear"
    inline_system: Optional[Dict[str, Any]] = None
    diffusion_scale: float = DEFAULT_DIFFUSION_SCALE
    hurst: float = 0.5
    dim: Optional[int] = None
    seeds: Tuple[int, ...] = (0,)
    horizon: int = config.TWO_SIDED_HORIZON
    steps_per_unit: int = 256
    n: int = 1024
    levy_level: Optional[int] = None
    alpha: Optional[float] = None
    solver: Dict[str, Any] = field(default_factory=dict)
    lp: Dict[str, Any] = field(default_factory=dict)
    xi: Optional[Tuple[float, ...]] = None
    t: float = 1.0
    tau: float = 0.0
    steps: int = 1
    matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    mode: str = "dichotomy"
    cs: Optional[float] = None
    beta_margin: Optional[float] = None
    chart: Optional[str] = None
    out_dir: str = str(config.OUTPUT_DIR)

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ExperimentConfig":
        unknown = set(payload) - set(CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        version = payload.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version} != supported {SCHEMA_VERSION}")
        for key, allowed in (("solver", SOLVER_FIELDS), ("lp", LP_FIELDS)):
            extra = set(payload.get(key) or {}) - set(allowed)
            if extra:
                raise ConfigError(f"unknown {key} keys: {sorted(extra)}")
        values = dict(payload)
        if "seeds" in values:
            seeds = values["seeds"]
            seeds = [seeds] if isinstance(seeds, int) else list(seeds)
            if not seeds:
                raise ConfigError("seeds must be nonempty")
            values["seeds"] = tuple(int(s) for s in seeds)
        if values.get("xi") is not None:
            values["xi"] = tuple(float(v) for v in values["xi"])
        if values.get("matrix") is not None:
            values["matrix"] = tuple(tuple(float(v) for v in row) for row in values["matrix"])
        for key in ("solver", "lp"):
            values[key] = dict(values.get(key) or {})
        cfg = cls(**values)
        if cfg.mode not in SPLIT_MODES:
            raise ConfigError(f"unknown split mode {cfg.mode!r}; use one of {SPLIT_MODES}")
        if cfg.matrix is None:
            cfg.system_spec()
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _LOCATION_KEYS}
        return config_hash(payload)

    def system_spec(self) -> SystemSpec:
        return resolve_system(self.system, self.inline_system, self.diffusion_scale)

    def resolved_alpha(self) -> float:
        return default_alpha(self.hurst) if self.alpha is None else float(self.alpha)

    def noise_dim(self, spec: SystemSpec | None = None) -> int:
        if self.dim is not None:
            return int(self.dim)
        return (spec or self.system_spec()).noise_dim

    def solve_options(self, **overrides: Any) -> SolveOptions:
        return SolveOptions(**{**self.solver, **overrides})

    def xi_vector(self, m: int, default: float = 0.1) -> np.ndarray:
        if self.xi is None:
            return np.full(m, default)
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (m,):
            raise ConfigError(f"xi has {xi.size} entries, the system state has {m}")
        return xi


# ----------------------------
# Shared helpers
# ----------------------------


def _horizon_for(cfg: ExperimentConfig, needed: float) -> int:
    """Smallest power-of-two horizon >= needed, starting from the configured one."""
    horizon = int(cfg.horizon)
    if horizon >= needed:
        return horizon
    grown = horizon
    while grown < needed:
        grown *= 2
    logger.warning("noise horizon grown from %d to %d to fit the fiber window", horizon, grown)
    return grown


def _noise(cfg: ExperimentConfig, seed: int, noise_dim: int, needed: float = 0.0) -> RoughPath:
    return sample_two_sided(
        cfg.hurst,
        noise_dim,
        seed,
        _horizon_for(cfg, needed),
        cfg.steps_per_unit,
        level=cfg.levy_level,
        alpha=cfg.resolved_alpha(),
    )


def _unit_path(cfg: ExperimentConfig, seed: int, noise_dim: int):
    grid = make_uniform_grid(cfg.n + 1, 0.0, 1.0)
    return sample_fbm(FbmSpec(cfg.hurst, noise_dim, seed, grid))


def _fan_out(worker, cfg: ExperimentConfig, *args: Any) -> List[Dict[str, Any]]:
    jobs = max(1, min(config.THREADS, len(cfg.seeds)))
    return Parallel(n_jobs=jobs)(delayed(worker)(cfg, seed, *args) for seed in cfg.seeds)


def _lp_options(
    cfg: ExperimentConfig, spec: SystemSpec, gap: GapConstants, lipschitz: float | None = None
) -> LpOptions:
    lp = cfg.lp
    truncate = lp.get("truncate", spec.CG > 0)
    radius = TemperedRadius.from_gap(gap, spec.F, spec.G) if truncate else None
    rule = lp.get("drift_rule") or ("left" if spec.CG > 0 else "trapezoid")
    return LpOptions(
        window=int(lp.get("window", config.LP_WINDOW)),
        tail_depth=lp.get("tail_depth"),
        tol=float(lp.get("tol", 1e-12)),
        max_iter=int(lp.get("max_iter", 200)),
        radius=radius,
        drift_rule=rule,
        eta=lp.get("eta"),
        gap=gap,
        probe_scale=float(lp.get("probe_scale", 1e-3)),
        lipschitz=lipschitz,
    )


def _split_and_gap(cfg: ExperimentConfig, A: LinearPart) -> Tuple[Splitting, float, GapConstants]:
    split = spectral_split(A, mode=cfg.mode, beta_margin=cfg.beta_margin)
    C_S = float(cfg.cs) if cfg.cs is not None else semigroup_constant(A, cfg.resolved_alpha())
    if cfg.mode == "trichotomy":
        gap = trichotomy_gap_constant(split, C_S, cfg.lp.get("eta"))
    else:
        gap = gap_constant(split, C_S, cfg.lp.get("eta"))
    return split, C_S, gap


def _gap_constants_record(C_S: float, gap: GapConstants) -> Dict[str, float]:
    return {
        "C_S": C_S,
        "K": gap.K,
        "K_closed_form": gap.K_closed_form,
        "Mc": gap.Mc,
        "Ms": gap.Ms,
        "gamma": gap.gamma,
        "beta": gap.beta,
        "eta": gap.eta,
    }


# ----------------------------
# Workers: one seed each, no file writes
# ----------------------------


def _fbm_worker(cfg: ExperimentConfig, seed: int) -> Dict[str, Any]:
    path = _unit_path(cfg, seed, cfg.noise_dim())
    return {"seed": seed, "times": path.grid.points, "values": path.values, "B0": path.values[0]}


def _lift_worker(cfg: ExperimentConfig, seed: int) -> Dict[str, Any]:
    path = _unit_path(cfg, seed, cfg.noise_dim())
    alpha = cfg.resolved_alpha()
    if cfg.levy_level is None:
        rp = lift_smooth(path, alpha)
    else:
        rp = levy_area_dyadic(path, cfg.levy_level, alpha)
    return {"seed": seed, "rough_path": rp, "chen": asdict(check_chen(rp))}


def _solve_worker(cfg: ExperimentConfig, seed: int) -> Dict[str, Any]:
    spec = cfg.system_spec()
    rp = _noise(cfg, seed, spec.noise_dim, cfg.t).window(0.0, cfg.t)
    xi = cfg.xi_vector(spec.state_dim)
    opts = cfg.solve_options()
    solution = solve_rde(spec.A, spec.F, spec.G, xi, rp, opts)
    residual = mild_residual(spec.A, spec.F, spec.G, xi, rp, solution, opts.drift_rule)
    return {
        "seed": seed,
        "times": rp.grid.points,
        "values": solution.values,
        "diagnostics": {**solution.diagnostics(), "mild_residual": residual},
        "passed": residual <= RESIDUAL_SLACK * opts.tolerance,
    }


def _chart_worker(
    cfg: ExperimentConfig, seed: int, split: Splitting, gap: GapConstants
) -> Dict[str, Any]:
    spec = cfg.system_spec()
    opts = _lp_options(cfg, spec, gap)
    rp = _noise(cfg, seed, spec.noise_dim, opts.window)
    m = spec.state_dim
    chart = lp_fixed_point(rp, np.zeros(m), split, spec.F, spec.G, opts)
    direction = split.center_basis()[:, 0]
    default_radius = min(0.1, chart.rho)
    radius = float(cfg.lp.get("sample_radius", default_radius))
    count = int(cfg.lp.get("samples", 9))
    samples = []
    oracle_ratio = 0.0
    for x in np.linspace(-radius, radius, count):
        xi = x * direction
        h = manifold_graph(chart, xi)
        samples.append({"x": float(x), "xi": xi, "h": h})
        if spec.graph_oracle is not None and x != 0:
            error = float(np.linalg.norm(h - spec.graph_oracle(xi)))
            oracle_ratio = max(oracle_ratio, error / (5.0 * abs(x) ** 6))
    tangency = tangency_check(chart, float(opts.probe_scale))
    h0 = float(np.linalg.norm(chart.h))
    recovery = center_recovery_error(chart)
    passed = h0 <= 1e-10 and tangency.passed and recovery <= 1e-10
    if spec.graph_oracle is not None:
        passed = passed and oracle_ratio <= 1.0
    return {
        "seed": seed,
        "samples": samples,
        "rho": chart.rho,
        "R0": chart.diagnostics["R0"],
        "lipschitz": chart.lipschitz,
        "diagnostics": chart.diagnostics,
        "tangency": tangency.to_dict(),
        "h0": h0,
        "center_recovery_error": recovery,
        "oracle_ratio": oracle_ratio if spec.graph_oracle is not None else None,
        "passed": passed,
    }


def _invariance_worker(
    cfg: ExperimentConfig, seed: int, split: Splitting, gap: GapConstants
) -> Dict[str, Any]:
    spec = cfg.system_spec()
    opts = _lp_options(cfg, spec, gap)
    rp = _noise(cfg, seed, spec.noise_dim, max(opts.window, cfg.steps) + 1)
    direction = split.center_basis()[:, 0]
    xi = cfg.xi_vector(spec.state_dim) if cfg.xi is not None else 0.05 * direction
    chart = lp_fixed_point(rp, split.Pc @ xi, split, spec.F, spec.G, opts)
    tol = float(cfg.lp.get("invariance_tol", 1e-6))
    report = verify_invariance(chart, cfg.steps, tol)
    return {"seed": seed, "xi": chart.xi, "report": report.to_dict(), "passed": report.passed}


def _cocycle_worker(cfg: ExperimentConfig, seed: int) -> Dict[str, Any]:
    spec = cfg.system_spec()
    rp = _noise(cfg, seed, spec.noise_dim, cfg.t + cfg.tau)
    tol = float(cfg.lp.get("cocycle_tol", 1e-8))
    xi = cfg.xi_vector(spec.state_dim)
    report = cocycle_check(spec.A, spec.F, spec.G, xi, rp, cfg.t, cfg.tau, tol, cfg.solve_options())
    return {"seed": seed, **asdict(report)}


# ----------------------------
# Subcommand pipelines
# ----------------------------


def _run_sample_fbm(cfg: ExperimentConfig, record: RunRecord, out: Path) -> None:
    for result in _fan_out(_fbm_worker, cfg):
        name = f"fbm_seed{result['seed']}.csv"
        write_path_csv(out / name, result["times"], result["values"])
        record["artifacts"].append(name)
    record["diagnostics"]["rows"] = cfg.n + 1


def _run_lift(cfg: ExperimentConfig, record: RunRecord, out: Path) -> None:
    residuals = []
    for result in _fan_out(_lift_worker, cfg):
        name = f"lift_seed{result['seed']}.json"
        write_rough_path_json(out / name, result["rough_path"])
        record["artifacts"].append(name)
        residuals.append(result["chen"])
        if not result["chen"]["passed"]:
            record["status"] = STATUS_FAIL
    record["diagnostics"]["chen"] = residuals


def _run_solve(cfg: ExperimentConfig, record: RunRecord, out: Path) -> None:
    per_seed = []
    for result in _fan_out(_solve_worker, cfg):
        name = f"trajectory_seed{result['seed']}.csv"
        write_path_csv(out / name, result["times"], result["values"])
        record["artifacts"].append(name)
        per_seed.append({"seed": result["seed"], **result["diagnostics"]})
        if not result["passed"]:
            record["status"] = STATUS_FAIL
    record["diagnostics"]["solver"] = per_seed


def _run_center_manifold(cfg: ExperimentConfig, record: RunRecord, out: Path) -> None:
    spec = cfg.system_spec()
    split, C_S, gap = _split_and_gap(cfg, spec.A)
    charts = _fan_out(_chart_worker, cfg, split, gap)
    payload = {
        "config": cfg.to_dict(),
        "system": spec.name,
        "split": split.to_dict(),
        "gap": gap.to_dict(),
        "C_S": C_S,
        "charts": charts,
    }
    write_json(out / "chart.json", payload)
    record["artifacts"].append("chart.json")
    record["constants"] = {**_gap_constants_record(C_S, gap), "R": [c["R0"] for c in charts]}
    record["diagnostics"]["contraction_factors"] = [c["diagnostics"]["contraction_factor"] for c in charts]
    record["diagnostics"]["tail_bounds"] = [c["diagnostics"]["tail_bound"] for c in charts]
    record["diagnostics"]["oracle_ratio"] = [c["oracle_ratio"] for c in charts]
    if not all(c["passed"] for c in charts):
        record["status"] = STATUS_FAIL


def _run_verify_invariance(cfg: ExperimentConfig, record: RunRecord, out: Path) -> None:
    spec = cfg.system_spec()
    split, C_S, gap = _split_and_gap(cfg, spec.A)
    results = _fan_out(_invariance_worker, cfg, split, gap)
    write_json(out / "invariance.json", {"config": cfg.to_dict(), "system": spec.name, "runs": results})
    record["artifacts"].append("invariance.json")
    record["constants"] = _gap_constants_record(C_S, gap)
    record["diagnostics"]["max_gaps"] = [r["report"]["max_gap"] for r in results]
    record["diagnostics"]["ball_exits"] = [r["report"]["ball_exits"] for r in results]
    if not all(r["passed"] for r in results):
        record["status"] = STATUS_FAIL


def _run_gap_check(cfg: ExperimentConfig, record: RunRecord, out: Path) -> None:
    if cfg.matrix is not None:
        A = LinearPart(np.asarray(cfg.matrix, dtype=float))
    else:
        A = cfg.system_spec().A
    split, C_S, gap = _split_and_gap(cfg, A)
    payload: Dict[str, Any] = {"split": split.to_dict(), "gap": gap.to_dict(), "C_S": C_S}
    if cfg.mode == "trichotomy":
        payload["gap_negative_eta"] = trichotomy_gap_constant(split, C_S, convention="negative-eta").to_dict()
    write_json(out / "gap.json", payload)
    record["artifacts"].append("gap.json")
    record["constants"] = _gap_constants_record(C_S, gap)
    record["diagnostics"]["lhs"] = gap.lhs
    if not gap.valid:
        record["status"] = STATUS_FAIL


def _run_cocycle(cfg: ExperimentConfig, record: RunRecord, out: Path) -> None:
    results = _fan_out(_cocycle_worker, cfg)
    write_json(out / "cocycle.json", {"config": cfg.to_dict(), "runs": results})
    record["artifacts"].append("cocycle.json")
    record["diagnostics"]["gaps"] = [r["gap"] for r in results]
    if not all(r["passed"] for r in results):
        record["status"] = STATUS_FAIL


_PIPELINES = {
    "sample-fbm": _run_sample_fbm,
    "lift": _run_lift,
    "solve-rde": _run_solve,
    "center-manifold": _run_center_manifold,
    "verify-invariance": _run_verify_invariance,
    "gap-check": _run_gap_check,
    "cocycle-check": _run_cocycle,
}


def run(subcommand: str, cfg: ExperimentConfig) -> RunRecord:
    """
    Execute one subcommand pipeline and write its artifacts under cfg.out_dir.

    Args:
        subcommand: one of SUBCOMMANDS
        cfg: validated experiment configuration

    Returns a RunRecord dict with keys:
      - status: "pass" or "fail" (diagnostic outcome)
      - config_hash: sha256 of the canonical config
      - constants / diagnostics: numbers reported by the modules
      - artifacts: file names written, relative to out_dir (run_record.json last)
    """
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}; use one of {SUBCOMMANDS}")
    out = Path(cfg.out_dir)
    record = base_record(subcommand, cfg.hash())
    record["seeds"] = list(cfg.seeds)
    if not (subcommand == "gap-check" and cfg.matrix is not None):
        record["system"] = "inline" if cfg.inline_system else cfg.system
    logger.info("running %s (config %s) into %s", subcommand, record["config_hash"][:12], out)
    _PIPELINES[subcommand](cfg, record, out)
    record["artifacts"].append("run_record.json")
    write_json(out / "run_record.json", record)
    return record


def merge_overrides(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Flag values win over file values; nested solver/lp dicts merge key by key."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("solver", "lp"):
            merged[key] = {**(merged.get(key) or {}), **value}
        else:
            merged[key] = value
    return merged