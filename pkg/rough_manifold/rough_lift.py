from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy.linalg import cholesky, toeplitz

from . import config
from .errors import InvalidArgumentError, NumericalFailure
from .grid_paths import (
    ChenField,
    FieldDifference,
    SampledPath,
    TimeGrid,
    TwoParamField,
    increment_holder,
    make_uniform_grid,
    two_param_seminorm,
)

logger = logging.getLogger(__name__)

FBM_METHODS = ("auto", "cholesky", "davies-harte")


@dataclass(frozen=True, eq=False)
class RoughPath:
    first: SampledPath
    second: TwoParamField
    alpha: float
    chen_tol: float = config.CHEN_TOL

    def __post_init__(self) -> None:
        if not 1.0 / 3.0 < self.alpha <= 0.5:
            raise InvalidArgumentError(f"rough path exponent must lie in (1/3, 1/2], got {self.alpha}")
        if not self.first.grid.same_as(self.second.grid):
            raise InvalidArgumentError("first and second level live on different grids")
        d = self.first.dim
        if self.first.shape != (d,) or self.second.tensor_shape != (d, d):
            raise InvalidArgumentError("second level must carry d x d tensors for a d-dimensional path")
        origin = self.first.values[self.grid.anchor_index()]
        if np.max(np.abs(origin)) > 1e-12 * max(1.0, self.scale):
            raise InvalidArgumentError("rough paths are anchored at W_0 = 0")

    @property
    def grid(self) -> TimeGrid:
        return self.first.grid

    @property
    def dim(self) -> int:
        return self.first.dim

    @property
    def scale(self) -> float:
        return float(np.max(np.abs(self.first.values)))

    @cached_property
    def adjacent(self) -> Tuple[np.ndarray, np.ndarray]:
        """Increments W_{j,j+1} and WW_{j,j+1} over each grid cell."""
        return np.diff(self.first.values, axis=0), self.second.gap_diagonal(1)

    def w_norm(self, pair_policy: str | None = None) -> float:
        policy = pair_policy or config.PAIR_POLICY
        return float(increment_holder(self.first.values, self.grid.points, self.alpha, policy))

    def ww_norm(self, pair_policy: str | None = None) -> float:
        return two_param_seminorm(self.second, 2.0 * self.alpha, pair_policy or config.PAIR_POLICY)

    def restrict(self, i0: int, i1: int) -> "RoughPath":
        """Sub-window by index; the first level is re-anchored, increments are unchanged."""
        grid = self.grid.restrict(i0, i1)
        values = self.first.values[i0 : i1 + 1]
        values = values - values[grid.anchor_index()]
        return RoughPath(
            SampledPath(grid, values), self.second.restrict(i0, i1), self.alpha, self.chen_tol
        )

    def window(self, t0: float, t1: float) -> "RoughPath":
        return self.restrict(self.grid.index_of(t0), self.grid.index_of(t1))


@dataclass(frozen=True)
class ChenReport:
    max_residual: float
    argmax: Tuple[float, float, float]
    threshold: float
    passed: bool


# ----------------------------
# Lifts
# ----------------------------


def lift_smooth(path: SampledPath, alpha: float, chen_tol: float | None = None) -> RoughPath:
    """Lift a sampled path by the iterated integrals of its piecewise-linear interpolant."""
    grid = path.grid
    w = path.values - path.values[grid.anchor_index()]
    dw = np.diff(w, axis=0)
    start = w[:-1] - w[0]
    cell = np.einsum("na,nb->nab", start, dw) + 0.5 * np.einsum("na,nb->nab", dw, dw)
    anchor = np.concatenate([np.zeros((1,) + cell.shape[1:]), np.cumsum(cell, axis=0)])
    return RoughPath(
        SampledPath(grid, w),
        ChenField(grid, w, anchor),
        alpha,
        config.CHEN_TOL if chen_tol is None else chen_tol,
    )


def dyadic_interpolant(path: SampledPath, level: int) -> SampledPath:
    grid = path.grid
    if not grid.is_dyadic():
        raise InvalidArgumentError("dyadic lifts need a uniform grid with a power-of-two step count")
    depth = (grid.n - 1).bit_length() - 1
    if not 0 <= level <= depth:
        raise InvalidArgumentError(f"level {level} too deep for a grid of 2^{depth} steps")
    stride = (grid.n - 1) >> level
    nodes = np.arange(0, grid.n, stride)
    coarse_t = grid.points[nodes]
    values = np.stack(
        [np.interp(grid.points, coarse_t, path.values[nodes, k]) for k in range(path.dim)], axis=-1
    )
    return SampledPath(grid, values)


def levy_area_dyadic(path: SampledPath, level: int, alpha: float) -> RoughPath:
    """Lift of the level-`level` dyadic piecewise-linear interpolant, evaluated on the full grid."""
    return lift_smooth(dyadic_interpolant(path, level), alpha)


# ----------------------------
# Chen's relation
# ----------------------------


def _chen_threshold(rp: RoughPath, tol: float | None) -> float:
    tol = rp.chen_tol if tol is None else tol
    return tol * max(1.0, rp.scale ** 2)


def check_chen(rp: RoughPath, tol: float | None = None, method: str = "anchored") -> ChenReport:
    """Maximum Chen defect over grid triples.

    The anchored method checks every triple (t0, s, t): that family vanishes
    exactly when Chen's relation holds for all triples, and a defect on any
    triple is at most three times the reported maximum.
    """
    threshold = _chen_threshold(rp, tol)
    if method == "anchored":
        worst, where = _chen_anchored(rp)
    elif method == "all-triples":
        worst, where = _chen_all_triples(rp)
    else:
        raise InvalidArgumentError(f"unknown Chen check method {method!r}")
    pts = rp.grid.points
    argmax = tuple(float(pts[k]) for k in where)
    report = ChenReport(worst, argmax, threshold, worst <= threshold)
    logger.debug("chen residual %.3e at %s (threshold %.3e)", worst, argmax, threshold)
    return report


def _chen_anchored(rp: RoughPath) -> Tuple[float, Tuple[int, int, int]]:
    n = rp.grid.n
    w = rp.first.values
    field = rp.second
    anchor = np.zeros((n,) + field.tensor_shape)
    for gap in range(1, n):
        anchor[gap] = field.gap_diagonal(gap)[0]
    worst, where = 0.0, (0, 0, 0)
    for gap in range(1, n - 1):
        values = field.gap_diagonal(gap)[1:]
        left = w[1 : n - gap] - w[0]
        incr = w[1 + gap :] - w[1 : n - gap]
        expected = anchor[1 + gap :] - anchor[1 : n - gap] - np.einsum("na,nb->nab", left, incr)
        defect = np.sqrt(np.sum((values - expected) ** 2, axis=(1, 2)))
        k = int(np.argmax(defect))
        if defect[k] > worst:
            worst, where = float(defect[k]), (0, k + 1, k + 1 + gap)
    return worst, where


def _chen_all_triples(rp: RoughPath) -> Tuple[float, Tuple[int, int, int]]:
    dense = rp.second.to_dense()
    w = rp.first.values
    n = rp.grid.n
    worst, where = 0.0, (0, 0, 0)
    for s in range(n):
        for t in range(s + 2, n):
            u = np.arange(s + 1, t)
            defect = (
                dense[s, t][None]
                - dense[s, u]
                - dense[u, t]
                - np.einsum("na,nb->nab", w[u] - w[s], w[t] - w[u])
            )
            norms = np.sqrt(np.sum(defect ** 2, axis=(1, 2)))
            k = int(np.argmax(norms))
            if norms[k] > worst:
                worst, where = float(norms[k]), (s, int(u[k]), t)
    return worst, where


# ----------------------------
# Shifts and distances
# ----------------------------


def shift(rp: RoughPath, tau: float) -> RoughPath:
    """Theta_tau: W_t -> W_{t+tau} - W_tau, WW_{s,t} -> WW_{s+tau,t+tau}."""
    idx = rp.grid.index_of(tau)
    grid = rp.grid.shifted(float(rp.grid.points[idx]))
    first = SampledPath(grid, rp.first.values - rp.first.values[idx])
    return RoughPath(first, rp.second.with_grid(grid), rp.alpha, rp.chen_tol)


def fiber(rp: RoughPath, k: int, length: float = 1.0) -> RoughPath:
    """Theta_k W restricted to [0, length]."""
    shifted = shift(rp, float(k))
    try:
        return shifted.window(0.0, length)
    except InvalidArgumentError:
        raise InvalidArgumentError(
            f"fiber {k} of length {length} leaves the sampled window "
            f"[{rp.grid.t0}, {rp.grid.t1}]"
        ) from None


def fiber_norms(
    rp: RoughPath, ks: Sequence[int], pair_policy: str | None = None
) -> Tuple[np.ndarray, np.ndarray]:
    """(|Theta_k W|_alpha, |Theta_k WW|_{2alpha}) for each fiber index k."""
    w_norms, ww_norms = [], []
    for k in ks:
        piece = fiber(rp, k)
        w_norms.append(piece.w_norm(pair_policy))
        ww_norms.append(piece.ww_norm(pair_policy))
    return np.asarray(w_norms), np.asarray(ww_norms)


def rough_distance(a: RoughPath, b: RoughPath, pair_policy: str = "all-pairs") -> float:
    if not a.grid.same_as(b.grid):
        raise InvalidArgumentError("rough_distance needs both lifts on the same grid")
    if a.alpha != b.alpha:
        raise InvalidArgumentError("rough_distance needs equal Hölder exponents")
    first = increment_holder(
        a.first.values - b.first.values, a.grid.points, a.alpha, pair_policy
    )
    second = two_param_seminorm(FieldDifference(a.second, b.second), 2.0 * a.alpha, pair_policy)
    return float(first) + second


# ----------------------------
# fBm sampling
# ----------------------------


@dataclass(frozen=True, eq=False)
class FbmSpec:
    hurst: float
    dimension: int
    seed: int
    grid: TimeGrid

    def __post_init__(self) -> None:
        if not 1.0 / 3.0 < self.hurst <= 0.5:
            raise InvalidArgumentError(f"Hurst parameter must lie in (1/3, 1/2], got {self.hurst}")
        if self.dimension < 1:
            raise InvalidArgumentError("fBm dimension must be positive")
        if not self.grid.is_dyadic():
            raise InvalidArgumentError("fBm sampling needs a uniform grid with a power-of-two step count")


def fbm_covariance(s: np.ndarray, t: np.ndarray, hurst: float) -> np.ndarray:
    two_h = 2.0 * hurst
    return 0.5 * (np.abs(t) ** two_h + np.abs(s) ** two_h - np.abs(t - s) ** two_h)


def fgn_autocovariance(lags: np.ndarray, hurst: float) -> np.ndarray:
    """Unit-step autocovariance of fractional Gaussian noise."""
    k = np.abs(lags).astype(float)
    two_h = 2.0 * hurst
    return 0.5 * ((k + 1) ** two_h - 2 * k ** two_h + np.abs(k - 1) ** two_h)


@lru_cache(maxsize=16)
def _fgn_factor(m: int, hurst: float) -> np.ndarray:
    cov = toeplitz(fgn_autocovariance(np.arange(m), hurst))
    factor = cholesky(cov, lower=True)
    factor.setflags(write=False)
    return factor


def _fgn_cholesky(m: int, hurst: float, normals: np.ndarray) -> np.ndarray:
    if m > config.MAX_CHOLESKY_POINTS:
        raise InvalidArgumentError(
            f"Cholesky sampling capped at {config.MAX_CHOLESKY_POINTS} steps; "
            "use method='davies-harte' for longer grids"
        )
    return _fgn_factor(m, hurst) @ normals


def _fgn_davies_harte(m: int, hurst: float, rng: np.random.Generator, d: int) -> np.ndarray:
    gamma = fgn_autocovariance(np.arange(m + 1), hurst)
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    eig = np.real(sp_fft.fft(row))
    if np.min(eig) < -1e-10 * np.max(eig):
        if m <= config.MAX_CHOLESKY_POINTS:
            logger.warning("circulant embedding not positive for H=%s, m=%d; using Cholesky", hurst, m)
            return _fgn_cholesky(m, hurst, rng.standard_normal((m, d)))
        raise NumericalFailure(f"circulant embedding not positive semidefinite for H={hurst}, m={m}")
    size = row.size
    scale = np.sqrt(np.clip(eig, 0.0, None) / size)[:, None]
    noise = rng.standard_normal((size, d)) + 1j * rng.standard_normal((size, d))
    return np.real(sp_fft.fft(scale * noise, axis=0))[:m]


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator: the same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))


def component_rngs(seed: int, dimension: int) -> List[np.random.Generator]:
    """One independent Philox stream per noise component, spawned from the seed."""
    children = np.random.SeedSequence(int(seed)).spawn(dimension)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def sample_fbm(spec: FbmSpec, method: str = "auto") -> SampledPath:
    """One exact-in-law fBm sample per component, anchored at B_0 = 0."""
    if method not in FBM_METHODS:
        raise InvalidArgumentError(f"unknown fBm method {method!r}; use one of {FBM_METHODS}")
    grid = spec.grid
    m = grid.n - 1
    h = grid.steps[0]
    rngs = component_rngs(spec.seed, spec.dimension)
    if spec.hurst == 0.5:
        increments = np.stack([rng.standard_normal(m) for rng in rngs], axis=-1)
    elif method == "cholesky" or (method == "auto" and m <= config.MAX_CHOLESKY_POINTS):
        normals = np.stack([rng.standard_normal(m) for rng in rngs], axis=-1)
        increments = _fgn_cholesky(m, spec.hurst, normals)
    else:
        increments = np.concatenate([_fgn_davies_harte(m, spec.hurst, rng, 1) for rng in rngs], axis=-1)
    increments = increments * h ** spec.hurst
    values = np.concatenate([np.zeros((1, spec.dimension)), np.cumsum(increments, axis=0)])
    values = values - values[grid.anchor_index()]
    return SampledPath(grid, values)


def two_sided_grid(horizon: float, steps_per_unit: int) -> TimeGrid:
    return make_uniform_grid(int(round(2 * horizon * steps_per_unit)) + 1, -horizon, horizon)


def sample_two_sided(
    hurst: float,
    dimension: int,
    seed: int,
    horizon: float,
    steps_per_unit: int,
    level: Optional[int] = None,
    alpha: Optional[float] = None,
    method: str = "auto",
) -> RoughPath:
    """Lifted fBm on [-L, L] with W_0 = 0, glued across unit fibers by Chen's relation."""
    grid = two_sided_grid(horizon, steps_per_unit)
    path = sample_fbm(FbmSpec(hurst, dimension, seed, grid), method=method)
    alpha = default_alpha(hurst) if alpha is None else alpha
    depth = (grid.n - 1).bit_length() - 1
    if level is None or level >= depth:
        return lift_smooth(path, alpha)
    return levy_area_dyadic(path, level, alpha)


def default_alpha(hurst: float) -> float:
    return min(0.5, max(hurst - 0.05, 1.0 / 3.0 + 0.01))


# ----------------------------
# Temperedness
# ----------------------------


@dataclass(frozen=True)
class TemperednessReport:
    slope: float
    threshold: float
    fibers: int
    passed: bool


def temperedness_diagnostic(
    samples: Sequence[float],
    window: int | None = None,
    threshold: float | None = None,
    direction: str = "above",
) -> TemperednessReport:
    """Least-squares slope of ln+ of the samples against |i| over a symmetric fiber window.

    `direction="below"` tests 1/samples, i.e. temperedness from below.
    """
    values = np.asarray(samples, dtype=float)
    if values.size < 3:
        raise InvalidArgumentError("temperedness needs at least 3 fibers")
    if direction == "below":
        values = 1.0 / values
    elif direction != "above":
        raise InvalidArgumentError(f"unknown direction {direction!r}")
    half = values.size // 2 if window is None else int(window)
    indices = np.arange(values.size) - half
    threshold = config.TEMPEREDNESS_THRESHOLD if threshold is None else threshold
    log_plus = np.log(np.maximum(values, 1.0))
    slope = float(np.polyfit(np.abs(indices), log_plus, 1)[0])
    return TemperednessReport(slope, threshold, int(values.size), slope <= threshold)
