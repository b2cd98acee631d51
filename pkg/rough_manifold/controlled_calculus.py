from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from . import config
from .errors import BoundViolationError, InvalidArgumentError
from .grid_paths import (
    RemainderField,
    SampledPath,
    TimeGrid,
    contract_last,
    increment_holder,
    remainder_holder,
    tensor_norms,
)
from .rough_lift import RoughPath

logger = logging.getLogger(__name__)

FLAG_TOL = 1e-12
INTEGRAL_PRODUCTS = ("contract", "outer")

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ControlledPath:
    """(Y, Y') on a grid; Y' has one trailing noise axis more than Y."""

    y: SampledPath
    gubinelli: SampledPath
    alpha: float

    def __post_init__(self) -> None:
        if not self.y.grid.same_as(self.gubinelli.grid):
            raise InvalidArgumentError("path and Gubinelli derivative live on different grids")
        if self.gubinelli.shape[:-1] != self.y.shape:
            raise InvalidArgumentError(
                f"derivative shape {self.gubinelli.shape} does not extend path shape {self.y.shape}"
            )

    @property
    def grid(self) -> TimeGrid:
        return self.y.grid

    @property
    def noise_dim(self) -> int:
        return int(self.gubinelli.shape[-1])

    @classmethod
    def from_arrays(
        cls, grid: TimeGrid, y: np.ndarray, dy: np.ndarray, alpha: float
    ) -> "ControlledPath":
        return cls(SampledPath(grid, y), SampledPath(grid, dy), alpha)

    @classmethod
    def constant(
        cls, grid: TimeGrid, value: np.ndarray, derivative: np.ndarray, alpha: float
    ) -> "ControlledPath":
        value = np.asarray(value, dtype=float)
        derivative = np.asarray(derivative, dtype=float)
        y = np.broadcast_to(value, (grid.n,) + value.shape)
        dy = np.broadcast_to(derivative, (grid.n,) + derivative.shape)
        return cls.from_arrays(grid, y, dy, alpha)

    def remainder(self, rp: RoughPath) -> RemainderField:
        return RemainderField(self.grid, self.y.values, self.gubinelli.values, rp.first.values)

    def scaled(self, factor: float) -> "ControlledPath":
        return ControlledPath.from_arrays(
            self.grid, self.y.values * factor, self.gubinelli.values * factor, self.alpha
        )

    def restrict(self, i0: int, i1: int) -> "ControlledPath":
        return ControlledPath(self.y.restrict(i0, i1), self.gubinelli.restrict(i0, i1), self.alpha)


@dataclass(frozen=True)
class ControlledNorms:
    seminorm: float
    norm: float
    derivative_holder: float
    remainder_holder: float


def _check_aligned(cp: ControlledPath, rp: RoughPath) -> None:
    if not cp.grid.same_as(rp.grid):
        raise InvalidArgumentError("controlled path and rough path live on different grids")
    if cp.alpha != rp.alpha:
        raise InvalidArgumentError("controlled path exponent differs from the rough path's")
    if cp.noise_dim != rp.dim:
        raise InvalidArgumentError("Gubinelli derivative does not act on the noise dimension")


def controlled_norm_arrays(
    y: np.ndarray,
    dy: np.ndarray,
    w: np.ndarray,
    times: np.ndarray,
    alpha: float,
    pair_policy: str,
    tensor_ndim: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """(norm, seminorm) per batch entry; arrays are time-first with optional batch axes."""
    derivative = increment_holder(dy, times, alpha, pair_policy, tensor_ndim + 1)
    remainder = remainder_holder(y, dy, w, times, 2.0 * alpha, pair_policy, tensor_ndim)
    seminorm = derivative + remainder
    norm = tensor_norms(y[0], tensor_ndim) + tensor_norms(dy[0], tensor_ndim + 1) + seminorm
    return norm, seminorm


def controlled_norms(
    cp: ControlledPath, rp: RoughPath, pair_policy: str | None = None
) -> ControlledNorms:
    _check_aligned(cp, rp)
    policy = pair_policy or config.PAIR_POLICY
    tensor_ndim = len(cp.y.shape)
    times = cp.grid.points
    derivative = float(
        increment_holder(cp.gubinelli.values, times, cp.alpha, policy, tensor_ndim + 1)
    )
    remainder = float(
        remainder_holder(
            cp.y.values, cp.gubinelli.values, rp.first.values, times, 2 * cp.alpha, policy, tensor_ndim
        )
    )
    seminorm = derivative + remainder
    norm = (
        float(tensor_norms(cp.y.values[0], tensor_ndim))
        + float(tensor_norms(cp.gubinelli.values[0], tensor_ndim + 1))
        + seminorm
    )
    return ControlledNorms(seminorm, norm, derivative, remainder)


# ----------------------------
# Smooth coefficients
# ----------------------------


@dataclass(frozen=True, eq=False)
class SmoothCoefficient:
    """Vectorised coefficient H: R^m -> R^{output_shape} with its derivatives.

    `func(x)` maps (..., m) to (..., *output_shape); `jacobian(x)` to
    (..., *output_shape, m); `hessian(x)` to (..., *output_shape, m, m).
    `gap_constant` is C_H in |H(x) - H(y)| <= C_H max(|x|, |y|) |x - y|.
    """

    name: str
    func: ArrayFn
    jacobian: ArrayFn
    input_dim: int
    output_shape: Tuple[int, ...]
    hessian: Optional[ArrayFn] = None
    bounds: Tuple[float, float, float] = (np.inf, np.inf, np.inf)
    gap_constant: Optional[float] = None
    vanishes_at_zero: bool = False
    flat_at_zero: bool = False
    second_flat_at_zero: bool = False

    def __post_init__(self) -> None:
        zero = np.zeros(self.input_dim)
        checks = [
            (self.vanishes_at_zero, lambda: self.func(zero), "H(0) = 0"),
            (self.flat_at_zero, lambda: self.jacobian(zero), "DH(0) = 0"),
            (self.second_flat_at_zero, lambda: self.second_derivative(zero), "D2H(0) = 0"),
        ]
        for flagged, evaluate, label in checks:
            if not flagged:
                continue
            value = float(np.max(np.abs(evaluate())))
            tol = FLAG_TOL if label != "D2H(0) = 0" or self.hessian is not None else 1e-6
            if value > tol:
                message = f"coefficient {self.name!r} flagged {label} but evaluates to {value:.3e}"
                if config.STRICT_FLAGS:
                    raise InvalidArgumentError(message)
                logger.warning(message)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.func(np.asarray(x, dtype=float))

    def second_derivative(self, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
        if self.hessian is not None:
            return self.hessian(x)
        columns = []
        for k in range(self.input_dim):
            e = np.zeros(self.input_dim)
            e[k] = step
            columns.append((self.jacobian(x + e) - self.jacobian(x - e)) / (2 * step))
        return np.stack(columns, axis=-1)

    def apply_derivative(self, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
        """DH(x) dx with dx shaped (..., m, d); returns (..., *output_shape, d)."""
        jac = self.jacobian(x)
        lead = x.shape[:-1]
        flat = jac.reshape(lead + (-1, self.input_dim))
        out = flat @ dx
        return out.reshape(lead + tuple(self.output_shape) + (dx.shape[-1],))

    @property
    def c2_bound(self) -> float:
        return float(max(self.bounds[0], self.bounds[1]))


def compose_smooth(
    G: SmoothCoefficient, cp: ControlledPath, rp: RoughPath | None = None
) -> ControlledPath:
    """(G(Y), DG(Y) Y')."""
    y = cp.y.values
    composed = ControlledPath.from_arrays(
        cp.grid, G(y), G.apply_derivative(y, cp.gubinelli.values), cp.alpha
    )
    if rp is not None:
        logger.info(
            "composition constant for %s: %.4g", G.name, composition_bound_ratio(G, cp, rp)
        )
    return composed


def composition_bound_ratio(
    G: SmoothCoefficient, cp: ControlledPath, rp: RoughPath, pair_policy: str | None = None
) -> float:
    """Measured C in |G(Y), G(Y)'| <= C |G|_{C2b} M (|Y'_0| + |Y,Y'|) (1 + |W|_alpha)^2."""
    composed = ControlledPath.from_arrays(
        cp.grid, G(cp.y.values), G.apply_derivative(cp.y.values, cp.gubinelli.values), cp.alpha
    )
    lhs = controlled_norms(composed, rp, pair_policy).norm
    size = float(tensor_norms(cp.gubinelli.values[0], len(cp.gubinelli.shape))) + controlled_norms(
        cp, rp, pair_policy
    ).norm
    scale = max(1.0, size)
    rhs = G.c2_bound * scale * size * (1.0 + rp.w_norm(pair_policy)) ** 2
    if rhs == 0.0 or not np.isfinite(rhs):
        return 0.0
    return lhs / rhs


def lipschitz_gap_bound(H: SmoothCoefficient, x: np.ndarray, y: np.ndarray) -> float:
    if not (H.vanishes_at_zero and H.flat_at_zero) or H.gap_constant is None:
        raise InvalidArgumentError(
            f"coefficient {H.name!r} needs H(0) = DH(0) = 0 and a gap constant"
        )
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    bound = H.gap_constant * max(np.linalg.norm(x), np.linalg.norm(y)) * np.linalg.norm(x - y)
    gap = float(np.linalg.norm(H(x) - H(y)))
    if gap > bound * (1 + 1e-12):
        raise BoundViolationError(
            f"|H(x) - H(y)| = {gap:.6e} exceeds C_H max(|x|,|y|)|x-y| = {bound:.6e}"
        )
    return float(bound)


# ----------------------------
# Cut-off
# ----------------------------


def _bump(x: np.ndarray) -> np.ndarray:
    positive = x > 0
    safe = np.where(positive, x, 1.0)
    return np.where(positive, np.exp(-1.0 / safe), 0.0)


@dataclass(frozen=True)
class CutoffFunction:
    """Smooth step equal to 1 up to `plateau` and 0 from `support` on."""

    plateau: float = 0.5
    support: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.plateau < self.support:
            raise InvalidArgumentError("cut-off needs 0 < plateau < support")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        up = _bump(self.support - x)
        down = _bump(x - self.plateau)
        value = up / (up + down)
        return float(value) if value.ndim == 0 else value

    def derivative(self, x, order: int = 1, step: float = 1e-3):
        """Central finite difference of the given order (1 to 3)."""
        x = np.asarray(x, dtype=float)
        stencils = {
            1: ([-1, 1], [-0.5, 0.5]),
            2: ([-1, 0, 1], [1.0, -2.0, 1.0]),
            3: ([-2, -1, 1, 2], [-0.5, 1.0, -1.0, 0.5]),
        }
        if order not in stencils:
            raise InvalidArgumentError("derivative order must be 1, 2 or 3")
        offsets, weights = stencils[order]
        total = sum(w * np.asarray(self(x + k * step)) for k, w in zip(offsets, weights))
        return total / step ** order

    def derivative_bound(self, order: int = 3, samples: int = 2001) -> float:
        band = np.linspace(self.plateau, self.support, samples)
        return float(np.max(np.abs(self.derivative(band, order))))


def truncation_factor(norm, R: float, f: CutoffFunction):
    if R <= 0:
        raise InvalidArgumentError(f"truncation radius must be positive, got {R}")
    return f(np.asarray(norm, dtype=float) / R)


def cutoff(
    cp: ControlledPath,
    rp: RoughPath,
    R: float,
    f: CutoffFunction,
    pair_policy: str | None = None,
) -> ControlledPath:
    """chi_R: both components scaled by f(|Y, Y'| / R), a constant in time."""
    factor = truncation_factor(controlled_norms(cp, rp, pair_policy).norm, R, f)
    if factor == 1.0:
        return cp
    return cp.scaled(float(factor))


# ----------------------------
# Gubinelli integral
# ----------------------------


def _cell_terms(
    y: np.ndarray, dy: np.ndarray, dw: np.ndarray, dww: np.ndarray, product: str
) -> np.ndarray:
    if product == "contract":
        return contract_last(y, dw) + np.einsum("n...ab,nba->n...", dy, dww)
    if product == "outer":
        return np.einsum("n...,na->n...a", y, dw) + np.einsum("n...b,nba->n...a", dy, dww)
    raise InvalidArgumentError(f"unknown integral product {product!r}; use one of {INTEGRAL_PRODUCTS}")


def gubinelli_partial_sums(
    cp: ControlledPath, rp: RoughPath, start: int = 0, product: str = "contract"
) -> np.ndarray:
    """Compensated sums from grid index `start` to every later node (first entry zero)."""
    _check_aligned_for(cp, rp, product)
    dw, dww = rp.adjacent
    terms = _cell_terms(
        cp.y.values[start:-1], cp.gubinelli.values[start:-1], dw[start:], dww[start:], product
    )
    zero = np.zeros((1,) + terms.shape[1:])
    return np.concatenate([zero, np.cumsum(terms, axis=0)])


def gubinelli_integral(
    cp: ControlledPath, rp: RoughPath, s: float, t: float, product: str = "contract"
) -> np.ndarray:
    """Sum of Y_u W_{u,v} + Y'_u WW_{u,v} over the grid cells of [s, t].

    With product="contract" Y acts on dW (Y carries a trailing noise axis);
    with product="outer" the integral is of Y (x) dW.
    """
    _check_aligned_for(cp, rp, product)
    i, j = cp.grid.index_of(s), cp.grid.index_of(t)
    if i > j:
        raise InvalidArgumentError(f"integral bounds out of order: s={s} > t={t}")
    dw, dww = rp.adjacent
    terms = _cell_terms(
        cp.y.values[i:j], cp.gubinelli.values[i:j], dw[i:j], dww[i:j], product
    )
    result = terms.sum(axis=0)
    if logger.isEnabledFor(logging.DEBUG) and j > i:
        logger.debug(
            "sewing error bound on [%s, %s]: %.3e", s, t, sewing_error_bound(cp, rp, s, t)
        )
    return result


def _check_aligned_for(cp: ControlledPath, rp: RoughPath, product: str) -> None:
    if not cp.grid.same_as(rp.grid):
        raise InvalidArgumentError("controlled path and rough path live on different grids")
    if product == "contract" and cp.y.shape[-1:] != (rp.dim,):
        raise InvalidArgumentError("contracted integrands need a trailing noise axis")


def sewing_constant(alpha: float) -> float:
    return 1.0 / (1.0 - 2.0 ** (1.0 - 3.0 * alpha))


def sewing_error_bound(
    cp: ControlledPath, rp: RoughPath, s: float, t: float, pair_policy: str | None = None
) -> float:
    """C (|W|_a |R^Y|_{2a} + |WW|_{2a} |Y'|_a) (t - s)^{3a}."""
    policy = pair_policy or config.PAIR_POLICY
    times = cp.grid.points
    tensor_ndim = len(cp.y.shape)
    derivative = float(
        increment_holder(cp.gubinelli.values, times, cp.alpha, policy, tensor_ndim + 1)
    )
    remainder = float(
        remainder_holder(
            cp.y.values, cp.gubinelli.values, rp.first.values, times, 2 * cp.alpha, policy, tensor_ndim
        )
    )
    alpha = cp.alpha
    size = rp.w_norm(policy) * remainder + rp.ww_norm(policy) * derivative
    return sewing_constant(alpha) * size * (t - s) ** (3 * alpha)
