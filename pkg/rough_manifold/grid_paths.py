from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import config
from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PAIR_POLICIES = ("all-pairs", "dyadic-pairs")

# grid times closer than this are treated as the same lattice point
TIME_ATOL = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self) -> None:
        points = _frozen(np.asarray(self.points, dtype=float).reshape(-1))
        if points.size < 2:
            raise InvalidArgumentError("A time grid needs at least 2 points.")
        if not np.all(np.diff(points) > 0):
            raise InvalidArgumentError("Grid points must be strictly increasing.")
        object.__setattr__(self, "points", points)

    @property
    def n(self) -> int:
        return int(self.points.size)

    @property
    def t0(self) -> float:
        return float(self.points[0])

    @property
    def t1(self) -> float:
        return float(self.points[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def mesh(self) -> float:
        return float(self.steps.max())

    def is_uniform(self, rtol: float = 1e-9) -> bool:
        steps = self.steps
        return bool(np.all(np.abs(steps - steps[0]) <= rtol * steps[0]))

    def is_dyadic(self) -> bool:
        """Uniform with a power-of-two number of steps."""
        cells = self.n - 1
        return self.is_uniform() and cells & (cells - 1) == 0

    def index_of(self, t: float) -> int:
        idx = int(np.searchsorted(self.points, t - TIME_ATOL * max(1.0, abs(t))))
        if idx >= self.n or abs(self.points[idx] - t) > TIME_ATOL * max(1.0, abs(t)):
            raise InvalidArgumentError(f"time {t!r} is not a grid point")
        return idx

    def contains(self, t: float) -> bool:
        try:
            self.index_of(t)
        except InvalidArgumentError:
            return False
        return True

    def restrict(self, i0: int, i1: int) -> "TimeGrid":
        """Sub-grid on the index range [i0, i1] inclusive."""
        if not 0 <= i0 < i1 < self.n:
            raise InvalidArgumentError(f"invalid index window [{i0}, {i1}] for {self.n} points")
        return TimeGrid(self.points[i0 : i1 + 1])

    def shifted(self, tau: float) -> "TimeGrid":
        return TimeGrid(self.points - tau)

    def same_as(self, other: "TimeGrid", atol: float = TIME_ATOL) -> bool:
        return self.n == other.n and bool(np.allclose(self.points, other.points, rtol=0.0, atol=atol))

    def anchor_index(self) -> int:
        """Index of t = 0 when it is a grid point, else the first index."""
        return self.index_of(0.0) if self.contains(0.0) else 0


def make_uniform_grid(n: int, t0: float, t1: float) -> TimeGrid:
    if n < 2:
        raise InvalidArgumentError(f"uniform grid needs n >= 2, got {n}")
    if not t0 < t1:
        raise InvalidArgumentError(f"uniform grid needs t0 < t1, got [{t0}, {t1}]")
    return TimeGrid(np.linspace(t0, t1, n))


@dataclass(frozen=True, eq=False)
class SampledPath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.grid.n:
            raise InvalidArgumentError(
                f"{values.shape[0]} values for a grid of {self.grid.n} points"
            )
        object.__setattr__(self, "values", _frozen(values))

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape[1:])

    @property
    def dim(self) -> int:
        return int(self.values.shape[-1])

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]

    def increment(self, s: float, t: float) -> np.ndarray:
        return self.at(t) - self.at(s)

    def restrict(self, i0: int, i1: int) -> "SampledPath":
        return SampledPath(self.grid.restrict(i0, i1), self.values[i0 : i1 + 1])


# ----------------------------
# Two-parameter fields
# ----------------------------


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...a,...b->...ab", a, b)


def contract_last(dy: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """Apply a linear-map-valued array (..., *T, d) to vectors (..., d)."""
    extra = dy.ndim - dw.ndim
    dw = dw.reshape(dw.shape[:-1] + (1,) * extra + dw.shape[-1:])
    return np.sum(dy * dw, axis=-1)


class TwoParamField(ABC):
    """Values on the ordered pairs s <= t of a grid, accessed diagonal by diagonal."""

    grid: TimeGrid

    @property
    @abstractmethod
    def tensor_shape(self) -> tuple: ...

    @abstractmethod
    def gap_diagonal(self, gap: int) -> np.ndarray:
        """Values at the pairs (i, i + gap) for every admissible i."""

    @abstractmethod
    def restrict(self, i0: int, i1: int) -> "TwoParamField": ...

    @abstractmethod
    def with_grid(self, grid: TimeGrid) -> "TwoParamField":
        """Same values indexed by a relabelled grid of equal size."""

    def pair(self, i: int, j: int) -> np.ndarray:
        if not 0 <= i <= j < self.grid.n:
            raise InvalidArgumentError(f"pair ({i}, {j}) outside the upper triangle")
        if i == j:
            return np.zeros(self.tensor_shape)
        return self.gap_diagonal(j - i)[i]

    def at(self, s: float, t: float) -> np.ndarray:
        return self.pair(self.grid.index_of(s), self.grid.index_of(t))

    def to_dense(self) -> np.ndarray:
        n = self.grid.n
        dense = np.zeros((n, n) + self.tensor_shape)
        rows = np.arange(n)
        for gap in range(1, n):
            dense[rows[: n - gap], rows[gap:]] = self.gap_diagonal(gap)
        return dense


class DenseField(TwoParamField):
    def __init__(self, grid: TimeGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape[:2] != (grid.n, grid.n):
            raise InvalidArgumentError("dense field must be indexed by (n, n) grid pairs")
        self.grid = grid
        self.values = _frozen(values)

    @property
    def tensor_shape(self) -> tuple:
        return tuple(self.values.shape[2:])

    def gap_diagonal(self, gap: int) -> np.ndarray:
        rows = np.arange(self.grid.n - gap)
        return self.values[rows, rows + gap]

    def restrict(self, i0: int, i1: int) -> "DenseField":
        return DenseField(self.grid.restrict(i0, i1), self.values[i0 : i1 + 1, i0 : i1 + 1])

    def with_grid(self, grid: TimeGrid) -> "DenseField":
        return DenseField(grid, self.values)

    def with_entry(self, i: int, j: int, value: np.ndarray) -> "DenseField":
        values = np.array(self.values)
        values[i, j] = value
        return DenseField(self.grid, values)

    @classmethod
    def from_function(
        cls, grid: TimeGrid, fn: Callable[[float, float], np.ndarray]
    ) -> "DenseField":
        pts = grid.points
        first = np.asarray(fn(pts[0], pts[0]), dtype=float)
        values = np.zeros((grid.n, grid.n) + first.shape)
        for i in range(grid.n):
            for j in range(i, grid.n):
                values[i, j] = fn(pts[i], pts[j])
        return cls(grid, values)


class ChenField(TwoParamField):
    """Second level rebuilt from W and the anchor B_t = WW_{t0,t}.

    WW_{s,t} = B_t - B_s - (W_s - W_{t0}) (x) (W_t - W_s), so Chen's relation holds
    by construction and memory stays linear in the grid size.
    """

    def __init__(self, grid: TimeGrid, path: np.ndarray, anchor: np.ndarray):
        path = np.asarray(path, dtype=float)
        anchor = np.asarray(anchor, dtype=float)
        if path.shape[0] != grid.n or anchor.shape[0] != grid.n:
            raise InvalidArgumentError("Chen field arrays must match the grid")
        self.grid = grid
        self.path = _frozen(path)
        self.anchor = _frozen(anchor)

    @property
    def tensor_shape(self) -> tuple:
        return tuple(self.anchor.shape[1:])

    def gap_diagonal(self, gap: int) -> np.ndarray:
        w, b = self.path, self.anchor
        return b[gap:] - b[:-gap] - _outer(w[:-gap] - w[0], w[gap:] - w[:-gap])

    def restrict(self, i0: int, i1: int) -> "ChenField":
        w = self.path[i0 : i1 + 1]
        b = self.anchor[i0 : i1 + 1]
        rebased = b - b[0] - _outer(w[0] - self.path[0], w - w[0])
        return ChenField(self.grid.restrict(i0, i1), w, rebased)

    def with_grid(self, grid: TimeGrid) -> "ChenField":
        return ChenField(grid, self.path, self.anchor)


class RemainderField(TwoParamField):
    """R^Y_{s,t} = Y_{s,t} - Y'_s W_{s,t}, evaluated lazily."""

    def __init__(self, grid: TimeGrid, y: np.ndarray, dy: np.ndarray, w: np.ndarray):
        self.grid = grid
        self.y = np.asarray(y, dtype=float)
        self.dy = np.asarray(dy, dtype=float)
        self.w = np.asarray(w, dtype=float)

    @property
    def tensor_shape(self) -> tuple:
        return tuple(self.y.shape[1:])

    def gap_diagonal(self, gap: int) -> np.ndarray:
        return remainder_diagonal(self.y, self.dy, self.w, gap)

    def restrict(self, i0: int, i1: int) -> "RemainderField":
        sl = slice(i0, i1 + 1)
        return RemainderField(self.grid.restrict(i0, i1), self.y[sl], self.dy[sl], self.w[sl])

    def with_grid(self, grid: TimeGrid) -> "RemainderField":
        return RemainderField(grid, self.y, self.dy, self.w)


class FieldDifference(TwoParamField):
    def __init__(self, a: TwoParamField, b: TwoParamField):
        if not a.grid.same_as(b.grid):
            raise InvalidArgumentError("fields live on different grids")
        self.grid = a.grid
        self.a = a
        self.b = b

    @property
    def tensor_shape(self) -> tuple:
        return self.a.tensor_shape

    def gap_diagonal(self, gap: int) -> np.ndarray:
        return self.a.gap_diagonal(gap) - self.b.gap_diagonal(gap)

    def restrict(self, i0: int, i1: int) -> "FieldDifference":
        return FieldDifference(self.a.restrict(i0, i1), self.b.restrict(i0, i1))

    def with_grid(self, grid: TimeGrid) -> "FieldDifference":
        return FieldDifference(self.a.with_grid(grid), self.b.with_grid(grid))


def remainder_diagonal(y: np.ndarray, dy: np.ndarray, w: np.ndarray, gap: int) -> np.ndarray:
    return (y[gap:] - y[:-gap]) - contract_last(dy[:-gap], w[gap:] - w[:-gap])


# ----------------------------
# Hölder estimators
# ----------------------------


def tensor_norms(x: np.ndarray, tensor_ndim: int) -> np.ndarray:
    if tensor_ndim == 0:
        return np.abs(x)
    axes = tuple(range(x.ndim - tensor_ndim, x.ndim))
    return np.sqrt(np.sum(x * x, axis=axes))


def pair_gaps(n: int, pair_policy: str) -> List[int]:
    if pair_policy == "all-pairs":
        return list(range(1, n))
    if pair_policy == "dyadic-pairs":
        gaps, gap = [], 1
        while gap < n:
            gaps.append(gap)
            gap *= 2
        return gaps
    raise InvalidArgumentError(f"unknown pair policy {pair_policy!r}; use one of {PAIR_POLICIES}")


def dyadic_constant(alpha: float) -> float:
    """all-pairs <= dyadic_constant * dyadic-pairs for first-level increments on uniform grids."""
    return 1.0 / (1.0 - 2.0 ** (-alpha))


def diagonal_sup(
    diagonal: Callable[[int], np.ndarray],
    times: np.ndarray,
    exponent: float,
    pair_policy: str,
    tensor_ndim: int,
) -> np.ndarray:
    """Max over selected pairs of |field(s,t)| / (t-s)^exponent.

    Leading axes of the diagonals beyond the pair index and the trailing
    `tensor_ndim` axes are batch axes; one sup is returned per batch entry.
    """
    best = None
    for gap in pair_gaps(times.size, pair_policy):
        values = tensor_norms(diagonal(gap), tensor_ndim)
        dt = (times[gap:] - times[:-gap]) ** exponent
        ratio = values / dt.reshape((-1,) + (1,) * (values.ndim - 1))
        current = ratio.max(axis=0)
        best = current if best is None else np.maximum(best, current)
    return best


def increment_holder(
    values: np.ndarray,
    times: np.ndarray,
    exponent: float,
    pair_policy: str,
    tensor_ndim: int = 1,
) -> np.ndarray:
    return diagonal_sup(
        lambda gap: values[gap:] - values[:-gap], times, exponent, pair_policy, tensor_ndim
    )


def remainder_holder(
    y: np.ndarray,
    dy: np.ndarray,
    w: np.ndarray,
    times: np.ndarray,
    exponent: float,
    pair_policy: str,
    tensor_ndim: int = 1,
) -> np.ndarray:
    return diagonal_sup(
        lambda gap: remainder_diagonal(y, dy, w, gap), times, exponent, pair_policy, tensor_ndim
    )


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgumentError(f"Hölder exponent must lie in (0, 1], got {alpha}")


def holder_seminorm(path: SampledPath, alpha: float, pair_policy: str | None = None) -> float:
    _check_alpha(alpha)
    policy = pair_policy or config.PAIR_POLICY
    return float(
        increment_holder(path.values, path.grid.points, alpha, policy, len(path.shape))
    )


def two_param_seminorm(
    field: TwoParamField, exponent: float, pair_policy: str = "all-pairs"
) -> float:
    if exponent <= 0:
        raise InvalidArgumentError(f"exponent must be positive, got {exponent}")
    return float(
        diagonal_sup(
            field.gap_diagonal, field.grid.points, exponent, pair_policy, len(field.tensor_shape)
        )
    )
