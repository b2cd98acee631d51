"""Discrete Lyapunov-Perron construction of random center manifolds.

Fibers are indexed by their position p = 0, 1, ..., N-1 counted backwards
from the present: fiber p covers [-p-1, -p] and is driven by Theta_{-p-1}W
restricted to [0, 1]. Sequences are stored time-first, shape (n, N, m), so
one batched recursion evaluates every fiber of the window at once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import expm

from . import config
from .controlled_calculus import (
    ControlledPath,
    CutoffFunction,
    SmoothCoefficient,
    controlled_norm_arrays,
)
from .errors import (
    ConvergenceFailure,
    GapViolationError,
    InvalidArgumentError,
    InvalidSplitError,
    NumericalFailure,
)
from .grid_paths import TimeGrid
from .linear_flow import (
    DRIFT_RULES,
    LinearPart,
    Propagators,
    Splitting,
    convolve_drift_values,
    convolve_rough_values,
)
from .rde_solver import SolveOptions, solve_rde, solve_rde_truncated
from .rough_lift import RoughPath, fiber, make_rng, shift

logger = logging.getLogger(__name__)

GAP_CONVENTIONS = ("dichotomy", "positive-eta", "negative-eta")

RadiusPolicy = Callable[[RoughPath], float]


# ----------------------------
# Gap condition
# ----------------------------


@dataclass(frozen=True)
class GapConstants:
    """Dichotomy constants with the weight exponent eta and the budget K.

    `K_closed_form` is the value of the closed-form choice; `K` is what the
    map actually uses, never larger than the closed form and always small
    enough that `lhs` stays below 1/4.
    """

    Mc: float
    gamma: float
    Ms: float
    beta: float
    C_S: float
    eta: float
    K: float
    K_closed_form: float
    lhs: float
    valid: bool
    convention: str = "dichotomy"
    rho1: Optional[float] = None
    Mu: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        payload: Dict[str, object] = {
            "Mc": self.Mc,
            "gamma": self.gamma,
            "Ms": self.Ms,
            "beta": self.beta,
            "C_S": self.C_S,
            "eta": self.eta,
            "K": self.K,
            "K_closed_form": self.K_closed_form,
            "lhs": self.lhs,
            "valid": self.valid,
            "convention": self.convention,
        }
        if self.rho1 is not None:
            payload["rho1"] = None if np.isinf(self.rho1) else self.rho1
            payload["Mu"] = self.Mu
        return payload


def _block(rate: float, M: float, C_S: float, weight: float) -> float:
    """e^{rate} (C_S M weight + 1) / (1 - e^{-rate}), one summand of a gap left side."""
    if rate <= 0:
        raise InvalidSplitError(f"gap term needs a positive rate, got {rate}")
    return float(np.exp(rate) * (C_S * M * weight + 1.0) / (1.0 - np.exp(-rate)))


def gap_lhs(
    K: float, Mc: float, gamma: float, Ms: float, beta: float, C_S: float, eta: float
) -> float:
    """Left side of the center-stable gap condition; the map contracts by 1/4 when this is < 1/4."""
    weight = float(np.exp(-eta))
    return K * (_block(beta + eta, Ms, C_S, weight) + _block(gamma - eta, Mc, C_S, weight))


def _closed_form_K(Mc: float, gamma: float, Ms: float, beta: float, C_S: float) -> float:
    half_sum = 0.5 * (beta + gamma)
    half_gap = 0.5 * (beta - gamma)
    inverse = 4.0 * np.exp(half_sum) * (np.exp(half_gap) * C_S * (Ms + Mc) + 1.0)
    return float((1.0 - np.exp(-half_sum)) / inverse)


def gap_constants_from_bounds(
    Mc: float,
    gamma: float,
    Ms: float,
    beta: float,
    C_S: float,
    eta: float | None = None,
    K: float | None = None,
) -> GapConstants:
    """GapConstants for raw dichotomy bounds.

    eta defaults to (gamma - beta)/2. The closed-form K matches the
    midpoint eta but can overshoot the 1/4 budget, so K is capped at
    (1 - GAP_MARGIN)/(4 * lhs(1)) unless given explicitly.
    """
    if gamma >= beta:
        raise InvalidSplitError(f"gap condition needs gamma < beta, got gamma={gamma} beta={beta}")
    if min(Mc, Ms) < 1.0 or C_S <= 0:
        raise InvalidArgumentError("dichotomy constants must be >= 1 and C_S positive")
    eta = 0.5 * (gamma - beta) if eta is None else float(eta)
    if not -beta < eta < 0.0:
        raise InvalidSplitError(f"weight exponent eta={eta} must lie in (-beta, 0) = ({-beta}, 0)")
    closed = _closed_form_K(Mc, gamma, Ms, beta, C_S)
    unit = gap_lhs(1.0, Mc, gamma, Ms, beta, C_S, eta)
    if K is None:
        K = min(closed, (1.0 - config.GAP_MARGIN) / (4.0 * unit))
        if closed * unit >= 0.25:
            logger.warning(
                "closed-form K=%.6g gives gap lhs %.4f >= 1/4; using K=%.6g", closed, closed * unit, K
            )
    elif K <= 0:
        raise InvalidArgumentError(f"K must be positive, got {K}")
    lhs = float(K) * unit
    constants = GapConstants(
        Mc=float(Mc), gamma=float(gamma), Ms=float(Ms), beta=float(beta), C_S=float(C_S),
        eta=eta, K=float(K), K_closed_form=closed, lhs=lhs, valid=lhs < 0.25,
    )
    logger.info(
        "gap constants: eta=%.4g K=%.6g (closed form %.6g) lhs=%.4f valid=%s",
        eta, constants.K, closed, lhs, constants.valid,
    )
    return constants


def gap_constant(
    split: Splitting, C_S: float, eta: float | None = None, K: float | None = None
) -> GapConstants:
    return gap_constants_from_bounds(split.Mc, split.gamma, split.Ms, split.beta, C_S, eta, K)


def trichotomy_gap_lhs(
    K: float,
    Mc: float,
    rho2: float,
    Ms: float,
    rho3: float,
    C_S: float,
    eta: float,
    Mu: float | None = None,
    rho1: float | None = None,
    convention: str = "positive-eta",
) -> float:
    """Three-block gap left side; the unstable block drops out when rho1 is None or infinite.

    "positive-eta" takes eta > 0 with rates eta - rho2, rho3 - eta and rho1 - eta.
    "negative-eta" keeps eta < 0 with rates rho2 - eta, rho3 + eta and rho1 + eta,
    which is exactly `gap_lhs` when there is no unstable block.
    """
    weight = float(np.exp(-eta))
    has_unstable = rho1 is not None and np.isfinite(rho1)
    if convention == "positive-eta":
        rates = [(eta - rho2, Mc), (rho3 - eta, Ms)]
        if has_unstable:
            rates.append((rho1 - eta, Mu or 1.0))
    elif convention == "negative-eta":
        rates = [(rho3 + eta, Ms), (rho2 - eta, Mc)]
        if has_unstable:
            rates.append((rho1 + eta, Mu or 1.0))
    else:
        raise InvalidArgumentError(f"unknown gap convention {convention!r}")
    return K * sum(_block(rate, M, C_S, weight) for rate, M in rates)


def _trichotomy_eta(split: Splitting, convention: str) -> Tuple[float, float]:
    """Admissible open interval for eta under the convention."""
    rho1 = np.inf if split.rho1 is None else split.rho1
    if convention == "positive-eta":
        return split.rho2, min(rho1, split.rho3)
    return -min(rho1, split.rho3), 0.0


def trichotomy_gap_constant(
    split: Splitting,
    C_S: float,
    eta: float | None = None,
    convention: str = "positive-eta",
    K: float | None = None,
) -> GapConstants:
    if convention not in ("positive-eta", "negative-eta"):
        raise InvalidArgumentError(f"unknown gap convention {convention!r}")
    low, high = _trichotomy_eta(split, convention)
    if not low < high:
        raise InvalidSplitError(f"no admissible eta: interval ({low}, {high}) is empty")
    if eta is None:
        # midpoint of the admissible band; "negative-eta" reduces to (gamma - beta)/2 without Pu
        eta = 0.5 * (low + high) if convention == "positive-eta" else 0.5 * (split.gamma + low)
    if not low < eta < high:
        raise InvalidSplitError(f"eta={eta} outside the admissible interval ({low}, {high})")
    Mu = split.Mu if split.Mu is not None else 1.0
    rho1 = np.inf if split.rho1 is None else split.rho1
    args = (split.Mc, split.rho2, split.Ms, split.rho3, C_S, eta)
    unit = trichotomy_gap_lhs(1.0, *args, Mu=Mu, rho1=rho1, convention=convention)
    equality = 1.0 / (4.0 * unit)
    K = equality * (1.0 - config.GAP_MARGIN) if K is None else float(K)
    lhs = K * unit
    constants = GapConstants(
        Mc=float(split.Mc), gamma=float(split.gamma), Ms=float(split.Ms), beta=float(split.beta),
        C_S=float(C_S), eta=float(eta), K=float(K), K_closed_form=float(equality), lhs=float(lhs),
        valid=lhs < 0.25, convention=convention, rho1=float(rho1), Mu=float(Mu),
    )
    logger.info(
        "trichotomy gap (%s): eta=%.4g K=%.6g (equality %.6g) lhs=%.4f",
        convention, eta, K, equality, lhs,
    )
    return constants


# ----------------------------
# Tempered radius
# ----------------------------


def tempered_radius(K: float, CF: float, CG: float, w_norm: float, ww_norm: float) -> float:
    """R(W) = min(K / (CF + CG (1 + |W|)(|W| + |WW|)), 1)."""
    if K <= 0:
        raise InvalidArgumentError(f"K must be positive, got {K}")
    if min(CF, CG, w_norm, ww_norm) < 0:
        raise InvalidArgumentError("radius inputs must be nonnegative")
    if CF == 0 and CG == 0:
        raise InvalidArgumentError("CF = CG = 0: the truncation radius is unbounded")
    denominator = CF + CG * (1.0 + w_norm) * (w_norm + ww_norm)
    if denominator == 0:
        return 1.0
    return float(min(K / denominator, 1.0))


@dataclass(frozen=True)
class TemperedRadius:
    """Per-fiber radius policy R(Theta_k W) from the noise norms of that fiber."""

    K: float
    CF: float
    CG: float
    pair_policy: Optional[str] = None

    @classmethod
    def from_gap(
        cls, gap: GapConstants, F: SmoothCoefficient, G: SmoothCoefficient, pair_policy: str | None = None
    ) -> "TemperedRadius":
        return cls(gap.K, float(F.gap_constant or 0.0), float(G.gap_constant or 0.0), pair_policy)

    def __call__(self, rp: RoughPath) -> float:
        return tempered_radius(
            self.K, self.CF, self.CG, rp.w_norm(self.pair_policy), rp.ww_norm(self.pair_policy)
        )


# ----------------------------
# Fiber sequences
# ----------------------------


@dataclass(frozen=True, eq=False)
class FiberSequence:
    """Controlled paths U^{-p-1} on [0, 1] for p = 0..N-1, stored time-first."""

    grid: TimeGrid
    values: np.ndarray
    derivatives: np.ndarray
    alpha: float
    eta: float

    def __post_init__(self) -> None:
        if self.values.shape[0] != self.grid.n or self.derivatives.shape[:3] != self.values.shape:
            raise InvalidArgumentError(
                f"sequence arrays {self.values.shape}/{self.derivatives.shape} do not match the fiber grid"
            )

    @property
    def window(self) -> int:
        return int(self.values.shape[1])

    @classmethod
    def zeros(
        cls, grid: TimeGrid, window: int, state_dim: int, noise_dim: int, alpha: float, eta: float
    ) -> "FiberSequence":
        return cls(
            grid,
            np.zeros((grid.n, window, state_dim)),
            np.zeros((grid.n, window, state_dim, noise_dim)),
            alpha,
            eta,
        )

    def fiber(self, p: int) -> ControlledPath:
        return ControlledPath.from_arrays(self.grid, self.values[:, p], self.derivatives[:, p], self.alpha)

    def minus(self, other: "FiberSequence") -> "FiberSequence":
        return replace(
            self, values=self.values - other.values, derivatives=self.derivatives - other.derivatives
        )

    def weights(self) -> np.ndarray:
        """e^{-eta(i-1)} with i = -p."""
        return np.exp(self.eta * (np.arange(self.window) + 1.0))

    def fiber_norms(self, w: np.ndarray, pair_policy: str) -> np.ndarray:
        norms, _ = controlled_norm_arrays(
            self.values, self.derivatives, w, self.grid.points, self.alpha, pair_policy
        )
        return np.asarray(norms, dtype=float)

    def weighted_norm(self, w: np.ndarray, pair_policy: str) -> float:
        return float(np.max(self.weights() * self.fiber_norms(w, pair_policy)))

    def endpoint_mismatch(self) -> float:
        """max_p |U^{-p-1}_0 - U^{-p-2}_1|."""
        if self.window < 2:
            return 0.0
        gaps = self.values[0, :-1] - self.values[-1, 1:]
        return float(np.max(np.linalg.norm(gaps, axis=-1)))

    def at_present(self) -> np.ndarray:
        """Value at time 0, the end of fiber 0."""
        return self.values[-1, 0]


@dataclass(frozen=True, eq=False)
class _FiberNoise:
    grid: TimeGrid
    w: np.ndarray
    dw: np.ndarray
    dww: np.ndarray
    fibers: Tuple[RoughPath, ...]

    @classmethod
    def build(cls, rp: RoughPath, window: int) -> "_FiberNoise":
        pieces = []
        for p in range(window):
            try:
                pieces.append(fiber(rp, -p - 1))
            except InvalidArgumentError as exc:
                raise InvalidArgumentError(
                    f"window of {window} fibers needs noise on [{-window}, 0]: {exc}"
                ) from None
        grid = pieces[0].grid
        if not all(piece.grid.same_as(grid) for piece in pieces[1:]):
            raise InvalidArgumentError("fibers of the window are sampled on different grids")
        adjacent = [piece.adjacent for piece in pieces]
        return cls(
            grid,
            np.stack([piece.first.values for piece in pieces], axis=1),
            np.stack([a[0] for a in adjacent], axis=1),
            np.stack([a[1] for a in adjacent], axis=1),
            tuple(pieces),
        )


# ----------------------------
# The discrete Lyapunov-Perron map
# ----------------------------


class LyapunovPerronMap:
    """J_d on a window of N fibers for a fixed two-sided noise path.

    For fiber p with i = -p, write T(i)[t] for the fiber's own drift plus rough
    convolution started from zero. The output is

        J1[i-1, t] = S(t)(c_i + s_i) + T(i)[t],
        c_i = S^c(i-1) xi - sum_{k=i..0} S^c(i-1-k) P^c T(k)[1],
        s_i = sum_{k=i-D..i-1} S^s(i-1-k) P^s T(k)[1],

    and J2 is G of the cut-off fiber path. Unstable directions, when the split
    has them, are summed from the present like the center ones.
    """

    def __init__(
        self,
        rp: RoughPath,
        split: Splitting,
        F: SmoothCoefficient,
        G: SmoothCoefficient,
        window: int | None = None,
        tail_depth: int | None = None,
        radius: Optional[RadiusPolicy] = None,
        cutoff_fn: CutoffFunction | None = None,
        drift_rule: str = "left",
        eta: float | None = None,
        pair_policy: str | None = None,
    ):
        self.window = int(config.LP_WINDOW if window is None else window)
        self.tail_depth = self.window if tail_depth is None else int(tail_depth)
        if self.window < 1 or self.tail_depth < 1:
            raise InvalidArgumentError("window and tail_depth must be at least 1")
        if drift_rule not in DRIFT_RULES:
            raise InvalidArgumentError(f"unknown drift rule {drift_rule!r}")
        m = split.A.shape[0]
        if F.input_dim != m or G.input_dim != m or G.output_shape != (m, rp.dim):
            raise InvalidArgumentError("coefficients do not match the state and noise dimensions")
        self.rp = rp
        self.split = split
        self.F = F
        self.G = G
        self.cutoff_fn = cutoff_fn or CutoffFunction()
        self.drift_rule = drift_rule
        self.pair_policy = pair_policy or config.PAIR_POLICY
        self.eta = 0.5 * (split.gamma - split.beta) if eta is None else float(eta)
        if not -split.beta < self.eta < 0.0:
            raise InvalidArgumentError(f"weight exponent eta={self.eta} must lie in (-beta, 0)")
        self.noise = _FiberNoise.build(rp, self.window)
        self.times = self.noise.grid.points - self.noise.grid.t0
        self.props = Propagators(split.A)
        self.flow = self.props.at(self.times)
        forward = split.Pc if split.Pu is None else split.Pc + split.Pu
        self.back = expm(-split.A) @ forward
        self.stable_powers = np.stack([split.stable_group(float(j)) for j in range(self.tail_depth)])
        self.radii: Optional[np.ndarray] = None
        if radius is not None:
            self.radii = np.array([float(radius(piece)) for piece in self.noise.fibers])
            if np.any(self.radii <= 0):
                raise InvalidArgumentError("truncation radii must be positive")
            logger.info(
                "LP window: %d fibers, radii min %.3g max %.3g", self.window, self.radii.min(), self.radii.max()
            )

    @property
    def state_dim(self) -> int:
        return int(self.split.A.shape[0])

    @property
    def alpha(self) -> float:
        return self.rp.alpha

    def zero_sequence(self) -> FiberSequence:
        return FiberSequence.zeros(
            self.noise.grid, self.window, self.state_dim, self.rp.dim, self.alpha, self.eta
        )

    def center_vector(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).reshape(-1)
        if xi.shape != (self.state_dim,):
            raise InvalidArgumentError(f"center vector must have shape ({self.state_dim},), got {xi.shape}")
        projected = self.split.Pc @ xi
        if np.linalg.norm(xi - projected) > 1e-8 * max(1.0, float(np.linalg.norm(xi))):
            raise InvalidArgumentError("xi does not lie in the center subspace")
        return projected

    def factors(self, seq: FiberSequence) -> np.ndarray:
        if self.radii is None:
            return np.ones(self.window)
        norms = seq.fiber_norms(self.noise.w, self.pair_policy)
        return np.asarray(self.cutoff_fn(norms / self.radii), dtype=float).reshape(self.window)

    def integrals(self, seq: FiberSequence) -> Tuple[np.ndarray, np.ndarray]:
        """(T, G_R(U)): per-fiber convolutions from zero and the cut-off integrand."""
        factor = self.factors(seq)
        x = seq.values * factor[None, :, None]
        dx = seq.derivatives * factor[None, :, None, None]
        integrand = self.G(x)
        derivative = self.G.apply_derivative(x, dx)
        drift = convolve_drift_values(
            self.props, self.times, self.F(x), np.zeros((self.window, self.state_dim)), self.drift_rule
        )
        rough = convolve_rough_values(
            self.props, self.times, integrand, derivative, self.noise.dw, self.noise.dww
        )
        return drift + rough, integrand

    def center_coefficients(self, ends: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """c_i for every fiber by c_{p} = S^c(-1)(c_{p-1} - P^c T_p[1]), starting from xi."""
        forward = self.split.Pc if self.split.Pu is None else self.split.Pc + self.split.Pu
        out = np.empty((self.window, self.state_dim))
        current = xi
        for p in range(self.window):
            current = self.back @ (current - forward @ ends[p])
            out[p] = current
        return out

    def stable_coefficients(self, ends: np.ndarray) -> np.ndarray:
        """s_i, summing the stable parts of older fibers up to tail_depth back."""
        out = np.zeros((self.window, self.state_dim))
        for p in range(self.window):
            last = min(p + self.tail_depth, self.window - 1)
            if last <= p:
                continue
            older = ends[p + 1 : last + 1]
            out[p] = np.einsum("jab,jb->a", self.stable_powers[: older.shape[0]], older)
        return out

    def apply(self, seq: FiberSequence, xi: np.ndarray) -> FiberSequence:
        xi = self.center_vector(xi)
        T, integrand = self.integrals(seq)
        ends = T[-1]
        coefficients = self.center_coefficients(ends, xi) + self.stable_coefficients(ends)
        values = np.einsum("tab,pb->tpa", self.flow, coefficients) + T
        return FiberSequence(self.noise.grid, values, integrand, self.alpha, self.eta)

    def weighted_norm(self, seq: FiberSequence) -> float:
        return seq.weighted_norm(self.noise.w, self.pair_policy)

    def stable_series(self, seq: FiberSequence) -> np.ndarray:
        """sum_{k<=0} S^s(-k) P^s T(k)[1] over the window."""
        T, _ = self.integrals(seq)
        ends = T[-1]
        depth = min(self.tail_depth, self.window - 1) + 1
        powers = np.stack([self.split.stable_group(float(q)) for q in range(depth)])
        return np.einsum("jab,jb->a", powers, ends[:depth])

    def tail_bound(self, weighted: float) -> float:
        split = self.split
        return float(
            split.Ms * np.exp(-split.beta * self.tail_depth) * weighted
            / (1.0 - np.exp(-(split.beta + self.eta)))
        )


def lp_map_apply(
    rp: RoughPath,
    seq: FiberSequence,
    xi_c: np.ndarray,
    split: Splitting,
    F: SmoothCoefficient,
    G: SmoothCoefficient,
    radius: Optional[RadiusPolicy] = None,
    tail_depth: int | None = None,
    cutoff_fn: CutoffFunction | None = None,
    drift_rule: str = "left",
    pair_policy: str | None = None,
) -> FiberSequence:
    lp_map = LyapunovPerronMap(
        rp, split, F, G, seq.window, tail_depth, radius, cutoff_fn, drift_rule, seq.eta, pair_policy
    )
    return lp_map.apply(seq, xi_c)


def contraction_probe(
    lp_map: LyapunovPerronMap, xi: np.ndarray, pairs: int = 20, seed: int = 0
) -> float:
    """Largest weighted-norm ratio |J(U) - J(V)| / |U - V| over random sequence pairs.

    Sequences are smooth random fibers scaled to controlled norm between
    0.3 and 1.2 times each fiber's radius (or 1 without truncation).
    """
    rng = make_rng(seed)
    times = lp_map.times
    n, N, m, d = times.size, lp_map.window, lp_map.state_dim, lp_map.rp.dim
    scale = lp_map.radii if lp_map.radii is not None else np.ones(N)
    basis = np.stack([np.ones_like(times), np.sin(np.pi * times), np.cos(np.pi * times), times], axis=-1)

    def random_sequence() -> FiberSequence:
        values = np.einsum("tk,kpa->tpa", basis, rng.standard_normal((4, N, m)))
        derivatives = np.einsum("tk,kpab->tpab", basis, rng.standard_normal((4, N, m, d)))
        seq = FiberSequence(lp_map.noise.grid, values, derivatives, lp_map.alpha, lp_map.eta)
        norms = seq.fiber_norms(lp_map.noise.w, lp_map.pair_policy)
        target = rng.uniform(0.3, 1.2, size=N) * scale / np.maximum(norms, 1e-300)
        return FiberSequence(
            seq.grid, values * target[None, :, None], derivatives * target[None, :, None, None],
            seq.alpha, seq.eta,
        )

    worst = 0.0
    for _ in range(pairs):
        u, v = random_sequence(), random_sequence()
        gap_in = lp_map.weighted_norm(u.minus(v))
        gap_out = lp_map.weighted_norm(lp_map.apply(u, xi).minus(lp_map.apply(v, xi)))
        if gap_in > 0:
            worst = max(worst, gap_out / gap_in)
    logger.info("LP contraction probe over %d pairs: %.4g", pairs, worst)
    return worst


# ----------------------------
# Fixed point and charts
# ----------------------------


@dataclass(frozen=True)
class LpOptions:
    window: int = config.LP_WINDOW
    tail_depth: Optional[int] = None
    tol: float = 1e-12
    max_iter: int = 200
    radius: Optional[RadiusPolicy] = None
    cutoff_fn: CutoffFunction = field(default_factory=CutoffFunction)
    drift_rule: str = "left"
    eta: Optional[float] = None
    pair_policy: Optional[str] = None
    gap: Optional[GapConstants] = None
    probe_scale: float = 1e-3
    lipschitz: Optional[float] = None

    def __post_init__(self) -> None:
        if self.tol <= 0 or self.max_iter < 1:
            raise InvalidArgumentError("fixed point needs tol > 0 and max_iter >= 1")

    def resolved_eta(self) -> Optional[float]:
        if self.eta is not None:
            return self.eta
        return self.gap.eta if self.gap is not None else None


@dataclass
class _Iteration:
    sequence: FiberSequence
    updates: List[float]
    contraction: float


def _contraction(updates: List[float], tol: float) -> float:
    ratios = [b / a for a, b in zip(updates[1:-1], updates[2:]) if a > 0 and b > tol]
    return max(ratios, default=0.0)


def _iterate(lp_map: LyapunovPerronMap, xi: np.ndarray, tol: float, max_iter: int) -> _Iteration:
    seq = lp_map.zero_sequence()
    updates: List[float] = []
    for k in range(max_iter):
        new = lp_map.apply(seq, xi)
        if not np.all(np.isfinite(new.values)):
            raise NumericalFailure(f"non-finite LP iterate after {k + 1} sweeps")
        update = lp_map.weighted_norm(new.minus(seq))
        updates.append(update)
        logger.debug("LP sweep %d update %.3e", k + 1, update)
        seq = new
        if update <= tol:
            return _Iteration(seq, updates, _contraction(updates, tol))
    factor = _contraction(updates[-6:], tol)
    diagnostics = {"updates": updates, "contraction_factor": factor}
    if factor >= 1.0:
        raise GapViolationError(
            f"LP map does not contract (factor {factor:.3g}); check the gap condition", diagnostics
        )
    raise ConvergenceFailure(f"LP fixed point did not reach {tol} in {max_iter} sweeps", diagnostics)


def chart_radius(R0: float, lipschitz: float, eta: float) -> float:
    """rho(W) = R(Theta_{-1}W) / (2 L_Gamma e^{-eta})."""
    if not np.isfinite(R0):
        return float("inf")
    if lipschitz <= 0:
        return float("inf")
    return float(R0 / (2.0 * lipschitz * np.exp(-eta)))


def lipschitz_gamma(
    lp_map: LyapunovPerronMap, scale: float = 1e-3, tol: float = 1e-12, max_iter: int = 200
) -> float:
    """max_j |Gamma(scale e_j)|_eta / scale over a center basis; Gamma(0) = 0."""
    basis = lp_map.split.center_basis()
    best = 0.0
    for j in range(basis.shape[1]):
        result = _iterate(lp_map, scale * basis[:, j], tol, max_iter)
        best = max(best, lp_map.weighted_norm(result.sequence) / scale)
    logger.info("measured Lipschitz constant of xi -> Gamma: %.6g", best)
    return best


@dataclass(eq=False)
class ManifoldChart:
    """Fixed point Gamma at xi with the graph value h^c(xi) = P^s Gamma[-1, 1]."""

    xi: np.ndarray
    gamma_seq: FiberSequence
    h: np.ndarray
    rho: float
    lipschitz: float
    diagnostics: Dict[str, object]
    lp_map: LyapunovPerronMap
    options: LpOptions
    _cache: Dict[Tuple[float, ...], np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def split(self) -> Splitting:
        return self.lp_map.split

    @property
    def rp(self) -> RoughPath:
        return self.lp_map.rp

    @property
    def eta(self) -> float:
        return self.lp_map.eta

    def to_dict(self) -> Dict[str, object]:
        return {
            "xi": self.xi.tolist(),
            "h": self.h.tolist(),
            "rho": None if np.isinf(self.rho) else self.rho,
            "lipschitz": self.lipschitz,
            "eta": self.eta,
            "window": self.lp_map.window,
            "tail_depth": self.lp_map.tail_depth,
            "diagnostics": dict(self.diagnostics),
        }


def _key(xi: np.ndarray) -> Tuple[float, ...]:
    return tuple(float(v) for v in np.round(xi, 15))


def lp_fixed_point(
    rp: RoughPath,
    xi_c: np.ndarray,
    split: Splitting,
    F: SmoothCoefficient,
    G: SmoothCoefficient,
    options: LpOptions | None = None,
) -> ManifoldChart:
    opts = options or LpOptions()
    if opts.gap is not None and not opts.gap.valid:
        logger.warning("gap constants are not valid (lhs=%.4f); the LP map may not contract", opts.gap.lhs)
    lp_map = LyapunovPerronMap(
        rp, split, F, G, opts.window, opts.tail_depth, opts.radius, opts.cutoff_fn,
        opts.drift_rule, opts.resolved_eta(), opts.pair_policy,
    )
    xi = lp_map.center_vector(xi_c)
    lipschitz = opts.lipschitz
    if lipschitz is None:
        lipschitz = lipschitz_gamma(lp_map, opts.probe_scale, opts.tol, opts.max_iter)
    R0 = float(lp_map.radii[0]) if lp_map.radii is not None else float("inf")
    rho = chart_radius(R0, lipschitz, lp_map.eta)
    outside = bool(np.linalg.norm(xi) > rho)
    if outside:
        logger.warning("|xi|=%.3g exceeds the chart radius rho=%.3g", np.linalg.norm(xi), rho)
    result = _iterate(lp_map, xi, opts.tol, opts.max_iter)
    seq = result.sequence
    h = split.Ps @ seq.at_present()
    weighted = lp_map.weighted_norm(seq)
    tail = lp_map.tail_bound(weighted)
    diagnostics: Dict[str, object] = {
        "iterations": len(result.updates),
        "final_update": result.updates[-1],
        "contraction_factor": result.contraction,
        "tail_bound": tail,
        "weighted_norm": weighted,
        "endpoint_mismatch": seq.endpoint_mismatch(),
        "outside_ball": outside,
        "R0": None if np.isinf(R0) else R0,
    }
    logger.info(
        "LP fixed point: %d sweeps, contraction %.3g, tail bound %.3e, rho %.3g",
        len(result.updates), result.contraction, tail, rho,
    )
    chart = ManifoldChart(xi, seq, h, rho, float(lipschitz), diagnostics, lp_map, opts)
    chart._cache[_key(xi)] = h
    return chart


def manifold_graph(chart: ManifoldChart, xi_c: np.ndarray) -> np.ndarray:
    """h^c(xi_c, W), solving the fixed point on first use of each xi."""
    xi = chart.lp_map.center_vector(xi_c)
    key = _key(xi)
    cached = chart._cache.get(key)
    if cached is not None:
        return cached.copy()
    if np.linalg.norm(xi) > chart.rho:
        logger.warning("evaluating h^c outside the chart ball: |xi|=%.3g > rho=%.3g", np.linalg.norm(xi), chart.rho)
    result = _iterate(chart.lp_map, xi, chart.options.tol, chart.options.max_iter)
    h = chart.split.Ps @ result.sequence.at_present()
    chart._cache[key] = h
    return h.copy()


def graph_series(chart: ManifoldChart) -> np.ndarray:
    """h^c as the stable series of the fixed point's fiber integrals."""
    return chart.lp_map.stable_series(chart.gamma_seq)


def center_recovery_error(chart: ManifoldChart) -> float:
    """|P^c Gamma[-1, 1] - xi|."""
    return float(np.linalg.norm(chart.split.Pc @ chart.gamma_seq.at_present() - chart.xi))


def rebase_chart(chart: ManifoldChart, tau: float, xi_c: np.ndarray) -> ManifoldChart:
    """Chart for the shifted noise Theta_tau W, reusing the measured L_Gamma."""
    opts = replace(chart.options, lipschitz=chart.lipschitz, eta=chart.eta)
    return lp_fixed_point(shift(chart.rp, tau), xi_c, chart.split, chart.lp_map.F, chart.lp_map.G, opts)


# ----------------------------
# Verification
# ----------------------------


@dataclass
class InvarianceReport:
    gaps: List[float]
    intra_gaps: List[float]
    ball_exits: List[int]
    tol: float
    passed: bool

    def to_dict(self) -> Dict[str, object]:
        return {
            "gaps": list(self.gaps),
            "intra_gaps": list(self.intra_gaps),
            "ball_exits": list(self.ball_exits),
            "tol": self.tol,
            "passed": self.passed,
            "max_gap": max(self.gaps, default=0.0),
        }


def _flow_unit(chart: ManifoldChart, state: np.ndarray, piece: RoughPath) -> np.ndarray:
    lp_map = chart.lp_map
    A = LinearPart(lp_map.split.A)
    opts = SolveOptions(drift_rule=lp_map.drift_rule, tolerance=1e-13, pair_policy=lp_map.pair_policy)
    if chart.options.radius is None:
        solution = solve_rde(A, lp_map.F, lp_map.G, state, piece, opts)
    else:
        solution = solve_rde_truncated(
            A, lp_map.F, lp_map.G, state, piece, chart.options.radius, lp_map.cutoff_fn, opts
        )
    return solution.values


def verify_invariance(
    chart: ManifoldChart, steps: int, tol: float, W: RoughPath | None = None
) -> InvarianceReport:
    """Flow a chart point one unit at a time and compare with the chart of the shifted noise.

    Step i starts at time i - 1 from the previous point, is driven by
    Theta_{i-1}W, and is measured against the chart built on Theta_i W at the
    new center coordinate. The whole flowed fiber is also compared with that
    chart's fiber 0.
    """
    if steps < 1:
        raise InvalidArgumentError("invariance check needs at least one step")
    if W is not None and W is not chart.rp:
        opts = replace(chart.options, lipschitz=chart.lipschitz, eta=chart.eta)
        chart = lp_fixed_point(W, chart.xi, chart.split, chart.lp_map.F, chart.lp_map.G, opts)
    state = chart.xi + chart.h
    Pc, Ps = chart.split.Pc, chart.split.Ps
    gaps: List[float] = []
    intra: List[float] = []
    exits: List[int] = []
    for i in range(1, steps + 1):
        try:
            piece = fiber(chart.rp, i - 1)
        except InvalidArgumentError:
            raise InvalidArgumentError(
                f"noise on [{chart.rp.grid.t0}, {chart.rp.grid.t1}] does not cover {steps} steps"
            ) from None
        path = _flow_unit(chart, state, piece)
        state = path[-1]
        current = rebase_chart(chart, float(i), Pc @ state)
        gap = float(np.linalg.norm(Ps @ state - current.h))
        intra_gap = float(np.max(np.linalg.norm(path - current.gamma_seq.values[:, 0], axis=-1)))
        gaps.append(gap)
        intra.append(intra_gap)
        if current.diagnostics["outside_ball"]:
            exits.append(i)
            logger.warning("step %d: trajectory left the chart ball (rho=%.3g)", i, current.rho)
        logger.info("invariance step %d: gap %.3e, intra-fiber gap %.3e", i, gap, intra_gap)
    passed = all(g <= tol for g in gaps)
    return InvarianceReport(gaps, intra, exits, float(tol), passed)


@dataclass
class TangencyReport:
    scale: float
    slopes: List[List[float]]
    max_slope: float
    slope_ratios: List[Optional[float]]
    half_second_differences: List[List[float]]
    bound: float
    passed: bool

    def to_dict(self) -> Dict[str, object]:
        return {
            "scale": self.scale,
            "slopes": self.slopes,
            "max_slope": self.max_slope,
            "slope_ratios": self.slope_ratios,
            "half_second_differences": self.half_second_differences,
            "bound": self.bound,
            "passed": self.passed,
        }


def tangency_check(chart: ManifoldChart, h: float = 1e-3, constant: float = 1.0) -> TangencyReport:
    """Finite-difference Dh^c(0) along each center direction; passes when every entry is <= constant * h."""
    if h <= 0:
        raise InvalidArgumentError("probe scale must be positive")
    basis = chart.split.center_basis()
    zero = manifold_graph(chart, np.zeros(chart.split.A.shape[0]))
    slopes, ratios, seconds = [], [], []
    for j in range(basis.shape[1]):
        e = basis[:, j]
        plus = manifold_graph(chart, h * e)
        minus = manifold_graph(chart, -h * e)
        half = manifold_graph(chart, 0.5 * h * e)
        slopes.append(((plus - minus) / (2.0 * h)).tolist())
        seconds.append(((plus + minus - 2.0 * zero) / (h * h) / 2.0).tolist())
        coarse = np.linalg.norm(plus - zero) / h
        fine = np.linalg.norm(half - zero) / (0.5 * h)
        ratios.append(float(coarse / fine) if fine > 0 else None)
    max_slope = float(np.max(np.abs(slopes))) if slopes else 0.0
    bound = constant * h
    logger.info("tangency at h=%.3g: max |Dh(0)| %.3e, slope ratios %s", h, max_slope, ratios)
    return TangencyReport(float(h), slopes, max_slope, ratios, seconds, bound, max_slope <= bound)
