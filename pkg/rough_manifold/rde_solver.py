from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from . import config
from .controlled_calculus import (
    ControlledPath,
    CutoffFunction,
    SmoothCoefficient,
    controlled_norm_arrays,
    truncation_factor,
)
from .errors import ConvergenceFailure, InvalidArgumentError, NumericalFailure
from .linear_flow import DRIFT_RULES, LinearPart, Propagators, convolve_drift_values, convolve_rough_values
from .rough_lift import RoughPath, make_rng, shift

logger = logging.getLogger(__name__)

RadiusPolicy = Callable[[RoughPath], float]


@dataclass(frozen=True, eq=False)
class SolveOptions:
    max_iter: int = 200
    tolerance: float = 1e-10
    subintervals: int = 1
    drift_rule: str = "left"
    radius_policy: Optional[RadiusPolicy] = None
    split_ratio: float = config.SPLIT_RATIO
    min_cells: int = config.MIN_SUBINTERVAL_CELLS
    probe_iterations: int = 3
    pair_policy: str = config.PAIR_POLICY
    initial: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.tolerance <= 0:
            raise InvalidArgumentError("solver tolerance must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("solver needs at least one iteration")
        if self.subintervals < 1:
            raise InvalidArgumentError("subinterval count must be at least 1")
        if self.drift_rule not in DRIFT_RULES:
            raise InvalidArgumentError(f"unknown drift rule {self.drift_rule!r}")


@dataclass
class RdeSolution:
    path: ControlledPath
    residuals: List[float]
    iterations: int
    subinterval_norms: List[float]
    intervals: List[Tuple[float, float]] = field(default_factory=list)
    contraction_factors: List[float] = field(default_factory=list)
    radii: List[float] = field(default_factory=list)
    cutoff_constants: List[Dict[str, float]] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return self.path.y.values

    @property
    def final(self) -> np.ndarray:
        return self.path.y.values[-1]

    def diagnostics(self) -> Dict[str, object]:
        return {
            "iterations": self.iterations,
            "final_residual": self.residuals[-1] if self.residuals else 0.0,
            "max_contraction_factor": max(self.contraction_factors, default=0.0),
            "subintervals": len(self.intervals),
            "max_subinterval_norm": max(self.subinterval_norms, default=0.0),
            "radii": list(self.radii),
            "cutoff_constants": list(self.cutoff_constants),
        }


class _MildMap:
    """Right side of the mild equation on one grid window [i0, i1]."""

    def __init__(
        self,
        props: Propagators,
        F: SmoothCoefficient,
        G: SmoothCoefficient,
        rp: RoughPath,
        i0: int,
        i1: int,
        drift_rule: str,
    ):
        dw, dww = rp.adjacent
        self.props = props
        self.F = F
        self.G = G
        self.times = rp.grid.points[i0 : i1 + 1] - rp.grid.points[i0]
        self.w = rp.first.values[i0 : i1 + 1]
        self.dw = dw[i0:i1]
        self.dww = dww[i0:i1]
        self.alpha = rp.alpha
        self.drift_rule = drift_rule

    def apply(
        self, y: np.ndarray, dy: np.ndarray, factor: float, start: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        x = factor * y
        integrand = self.G(x)
        derivative = self.G.apply_derivative(x, factor * dy)
        drift = convolve_drift_values(self.props, self.times, self.F(x), start, self.drift_rule)
        rough = convolve_rough_values(self.props, self.times, integrand, derivative, self.dw, self.dww)
        return drift + rough, integrand

    def norm(self, y: np.ndarray, dy: np.ndarray, pair_policy: str) -> float:
        norm, _ = controlled_norm_arrays(y, dy, self.w, self.times, self.alpha, pair_policy)
        return float(norm)


@dataclass
class _PicardOutcome:
    y: np.ndarray
    dy: np.ndarray
    residuals: List[float]
    converged: bool
    stalled: bool


def _picard(
    mild: _MildMap,
    start: np.ndarray,
    y: np.ndarray,
    opts: SolveOptions,
    radius: Optional[float] = None,
    cutoff_fn: Optional[CutoffFunction] = None,
    allow_split: bool = True,
) -> _PicardOutcome:
    G = mild.G
    dy = G(y)
    residuals: List[float] = []
    for k in range(opts.max_iter):
        factor = 1.0
        if radius is not None:
            factor = float(truncation_factor(mild.norm(y, dy, opts.pair_policy), radius, cutoff_fn))
        y_new, dy_new = mild.apply(y, dy, factor, start)
        if radius is None:
            dy_new = G(y_new)
        if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(dy_new))):
            raise NumericalFailure(f"non-finite iterate after {k + 1} Picard steps")
        residual = mild.norm(y_new - y, dy_new - dy, opts.pair_policy)
        residuals.append(residual)
        logger.debug("picard step %d residual %.3e", k + 1, residual)
        y, dy = y_new, dy_new
        if residual <= opts.tolerance:
            return _PicardOutcome(y, dy, residuals, True, False)
        if (
            allow_split
            and k + 1 >= opts.probe_iterations
            and residual > 100 * opts.tolerance
            and residual > opts.split_ratio * residuals[-2]
        ):
            return _PicardOutcome(y, dy, residuals, False, True)
    return _PicardOutcome(y, dy, residuals, False, False)


def _contraction(residuals: List[float]) -> float:
    ratios = [b / a for a, b in zip(residuals[:-1], residuals[1:]) if a > 0]
    return max(ratios, default=0.0)


def _initial_guess(opts: SolveOptions, start: np.ndarray, i0: int, i1: int) -> np.ndarray:
    if opts.initial is not None:
        guess = np.array(opts.initial[i0 : i1 + 1], dtype=float)
        guess[0] = start
        return guess
    return np.broadcast_to(start, (i1 - i0 + 1,) + start.shape).copy()


def solve_rde(
    A: LinearPart,
    F: SmoothCoefficient,
    G: SmoothCoefficient,
    xi: np.ndarray,
    rp: RoughPath,
    opts: SolveOptions | None = None,
) -> RdeSolution:
    """Picard iteration of the mild equation, concatenated over contracting subintervals."""
    opts = opts or SolveOptions()
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (A.n,):
        raise InvalidArgumentError(f"initial value must have shape ({A.n},), got {xi.shape}")
    props = Propagators(A.A)
    n = rp.grid.n
    cells = n - 1
    chunk = max(1, cells // opts.subintervals)
    y_all = np.empty((n, A.n))
    y_all[0] = xi
    residuals: List[float] = []
    norms: List[float] = []
    intervals: List[Tuple[float, float]] = []
    factors: List[float] = []
    iterations = 0
    i = 0
    while i < cells:
        j = min(i + chunk, cells)
        mild = _MildMap(props, F, G, rp, i, j, opts.drift_rule)
        outcome = _picard(mild, y_all[i], _initial_guess(opts, y_all[i], i, j), opts)
        iterations += len(outcome.residuals)
        if outcome.stalled:
            if (j - i) // 2 < opts.min_cells:
                raise ConvergenceFailure(
                    "Picard iteration does not contract on the smallest subinterval",
                    {"interval": (float(rp.grid.points[i]), float(rp.grid.points[j])),
                     "residuals": outcome.residuals},
                )
            chunk = (j - i) // 2
            logger.info("halving subinterval to %d cells at t=%.6g", chunk, rp.grid.points[i])
            continue
        if not outcome.converged:
            raise ConvergenceFailure(
                f"tolerance {opts.tolerance} not reached in {opts.max_iter} iterations",
                {"residuals": outcome.residuals},
            )
        y_all[i : j + 1] = outcome.y
        residuals.extend(outcome.residuals)
        factors.append(_contraction(outcome.residuals))
        norms.append(mild.norm(outcome.y, outcome.dy, opts.pair_policy))
        intervals.append((float(rp.grid.points[i]), float(rp.grid.points[j])))
        i = j
    path = ControlledPath.from_arrays(rp.grid, y_all, G(y_all), rp.alpha)
    logger.info(
        "solve_rde: %d subintervals, %d iterations, max contraction %.3g",
        len(intervals), iterations, max(factors, default=0.0),
    )
    return RdeSolution(path, residuals, iterations, norms, intervals, factors)


def _cutoff_constants(
    mild: _MildMap,
    y: np.ndarray,
    R: float,
    f: CutoffFunction,
    pair_policy: str,
    rng: np.random.Generator,
    pairs: int = 3,
) -> Dict[str, float]:
    """Measured C in |F_R(Y) - F_R(Z)|_inf <= C R |Y - Z| and |G_R(Y) - G_R(Z)|_D <= C R |Y - Z|."""
    G = mild.G
    times = mild.times / max(mild.times[-1], 1e-300)
    basis = np.stack([np.sin(np.pi * times), np.cos(np.pi * times) - 1.0, times], axis=-1)

    def truncated(z: np.ndarray) -> Tuple[np.ndarray, ...]:
        dz = G(z)
        factor = float(truncation_factor(mild.norm(z, dz, pair_policy), R, f))
        x = factor * z
        return dz, mild.F(x), G(x), G.apply_derivative(x, factor * dz)

    dy, f1, g1, gd1 = truncated(y)
    drift = diffusion = 0.0
    for _ in range(pairs):
        bump = basis @ rng.standard_normal((3, y.shape[-1]))
        bump *= 0.05 * R / max(mild.norm(bump, G(bump), pair_policy), 1e-300)
        z = y + bump
        dz, f2, g2, gd2 = truncated(z)
        gap = mild.norm(y - z, dy - dz, pair_policy)
        if gap <= 0:
            continue
        drift = max(drift, float(np.max(np.linalg.norm(f1 - f2, axis=-1))) / (R * gap))
        g_norm, _ = controlled_norm_arrays(
            g1 - g2, gd1 - gd2, mild.w, mild.times, mild.alpha, pair_policy, len(G.output_shape)
        )
        diffusion = max(diffusion, float(g_norm) / (R * gap))
    return {"drift": drift, "diffusion": diffusion}


def _unit_chunks(rp: RoughPath) -> List[Tuple[int, int]]:
    """Index pairs cutting the grid at the first node on or after each unit edge."""
    points = rp.grid.points
    edges = np.arange(points[0] + 1.0, points[-1] - 1e-12, 1.0)
    inner = np.searchsorted(points, edges - 1e-12)
    bounds = np.unique(np.concatenate([[0], inner, [rp.grid.n - 1]]))
    return [(int(i), int(j)) for i, j in zip(bounds[:-1], bounds[1:])]


def solve_rde_truncated(
    A: LinearPart,
    F: SmoothCoefficient,
    G: SmoothCoefficient,
    xi: np.ndarray,
    rp: RoughPath,
    R: Union[float, RadiusPolicy, None],
    f: CutoffFunction | None = None,
    opts: SolveOptions | None = None,
) -> RdeSolution:
    """Fixed point of the truncated map, one unit fiber at a time.

    The cut-off scales by the controlled norm of the whole fiber, so each
    fiber is iterated as one piece; R is a number or a per-fiber policy.
    """
    opts = opts or SolveOptions()
    f = f or CutoffFunction()
    policy = R if callable(R) else opts.radius_policy
    if policy is None and (R is None or R <= 0):
        raise InvalidArgumentError(f"truncation radius must be positive, got {R}")
    xi = np.asarray(xi, dtype=float)
    props = Propagators(A.A)
    n = rp.grid.n
    y_all = np.empty((n, A.n))
    dy_all = np.empty((n,) + tuple(G.output_shape))
    y_all[0] = xi
    residuals: List[float] = []
    norms: List[float] = []
    factors: List[float] = []
    radii: List[float] = []
    constants: List[Dict[str, float]] = []
    intervals: List[Tuple[float, float]] = []
    rng = make_rng(0)
    iterations = 0
    for i, j in _unit_chunks(rp):
        radius = float(policy(rp.restrict(i, j))) if policy is not None else float(R)
        mild = _MildMap(props, F, G, rp, i, j, opts.drift_rule)
        outcome = _picard(
            mild, y_all[i], _initial_guess(opts, y_all[i], i, j), opts, radius, f, allow_split=False
        )
        iterations += len(outcome.residuals)
        if not outcome.converged:
            raise ConvergenceFailure(
                f"truncated map did not reach {opts.tolerance} on fiber "
                f"[{rp.grid.points[i]:.6g}, {rp.grid.points[j]:.6g}]",
                {"residuals": outcome.residuals, "radius": radius},
            )
        y_all[i : j + 1] = outcome.y
        dy_all[i : j + 1] = outcome.dy
        residuals.extend(outcome.residuals)
        factors.append(_contraction(outcome.residuals))
        norms.append(mild.norm(outcome.y, outcome.dy, opts.pair_policy))
        radii.append(radius)
        constants.append(_cutoff_constants(mild, outcome.y, radius, f, opts.pair_policy, rng))
        intervals.append((float(rp.grid.points[i]), float(rp.grid.points[j])))
    logger.info(
        "solve_rde_truncated: %d fibers, radii %s, measured Lipschitz ratios %s",
        len(intervals), ["%.3g" % r for r in radii], ["%.3g" % q for q in factors],
    )
    logger.info(
        "cut-off constants per fiber: drift %s, diffusion %s",
        ["%.3g" % c["drift"] for c in constants], ["%.3g" % c["diffusion"] for c in constants],
    )
    path = ControlledPath.from_arrays(rp.grid, y_all, dy_all, rp.alpha)
    return RdeSolution(path, residuals, iterations, norms, intervals, factors, radii, constants)


def mild_residual(
    A: LinearPart,
    F: SmoothCoefficient,
    G: SmoothCoefficient,
    xi: np.ndarray,
    rp: RoughPath,
    solution: RdeSolution,
    drift_rule: str = "left",
) -> float:
    """Nodewise sup of |right side of the mild equation at U - U| over the whole grid."""
    mild = _MildMap(Propagators(A.A), F, G, rp, 0, rp.grid.n - 1, drift_rule)
    y = solution.values
    image, _ = mild.apply(y, G(y), 1.0, np.asarray(xi, dtype=float))
    return float(np.max(np.linalg.norm(image - y, axis=-1)))


def truncated_lipschitz_ratio(
    A: LinearPart,
    F: SmoothCoefficient,
    G: SmoothCoefficient,
    rp: RoughPath,
    R: float,
    f: CutoffFunction | None = None,
    pairs: int = 10,
    seed: int = 0,
    drift_rule: str = "left",
    pair_policy: str | None = None,
) -> float:
    """Largest |T_R(Y1) - T_R(Y2)| / |Y1 - Y2| over random controlled-path pairs near the R-ball."""
    f = f or CutoffFunction()
    policy = pair_policy or config.PAIR_POLICY
    rng = make_rng(seed)
    mild = _MildMap(Propagators(A.A), F, G, rp, 0, rp.grid.n - 1, drift_rule)
    times = mild.times / max(mild.times[-1], 1e-300)
    zero_start = np.zeros(A.n)
    dy_zero = np.zeros((rp.grid.n, A.n, rp.dim))

    def smooth_path() -> np.ndarray:
        coeffs = rng.standard_normal((3, A.n))
        basis = np.stack([np.ones_like(times), np.sin(np.pi * times), np.cos(np.pi * times)], axis=-1)
        return basis @ coeffs

    def image(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        factor = float(truncation_factor(mild.norm(y, dy_zero, policy), R, f))
        return mild.apply(y, dy_zero, factor, zero_start)

    worst = 0.0
    for _ in range(pairs):
        base = smooth_path()
        base *= rng.uniform(0.3, 1.2) * R / max(mild.norm(base, dy_zero, policy), 1e-300)
        bump = smooth_path()
        bump *= 0.05 * R / max(mild.norm(bump, dy_zero, policy), 1e-300)
        y1, d1 = image(base)
        y2, d2 = image(base + bump)
        ratio = mild.norm(y1 - y2, d1 - d2, policy) / mild.norm(bump, dy_zero, policy)
        worst = max(worst, ratio)
    logger.info("truncated map Lipschitz ratio at R=%.3g: %.4g", R, worst)
    return worst


# ----------------------------
# Cocycle harness
# ----------------------------


@dataclass(frozen=True)
class CocycleReport:
    gap: float
    t: float
    tau: float
    tol: float
    passed: bool


def cocycle_check(
    A: LinearPart,
    F: SmoothCoefficient,
    G: SmoothCoefficient,
    xi: np.ndarray,
    rp: RoughPath,
    t: float,
    tau: float,
    tol: float,
    opts: SolveOptions | None = None,
) -> CocycleReport:
    """Compare phi(t + tau, W, xi) with phi(t, Theta_tau W, phi(tau, W, xi))."""
    if t < 0 or tau < 0:
        raise InvalidArgumentError("cocycle times must be nonnegative")
    xi = np.asarray(xi, dtype=float)
    if t == 0:
        return CocycleReport(0.0, t, tau, tol, True)
    direct = solve_rde(A, F, G, xi, rp.window(0.0, t + tau), opts).final
    midpoint = xi if tau == 0 else solve_rde(A, F, G, xi, rp.window(0.0, tau), opts).final
    composed = solve_rde(A, F, G, midpoint, shift(rp, tau).window(0.0, t), opts).final
    gap = float(np.linalg.norm(direct - composed))
    logger.info("cocycle gap t=%s tau=%s: %.3e", t, tau, gap)
    return CocycleReport(gap, float(t), float(tau), float(tol), gap <= tol)
