from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.linalg import expm, schur, solve_sylvester

from . import config
from .controlled_calculus import ControlledPath, SmoothCoefficient, controlled_norms
from .errors import InvalidArgumentError, SpectrumViolationError
from .grid_paths import contract_last, increment_holder
from .rough_lift import RoughPath

logger = logging.getLogger(__name__)

DRIFT_RULES = ("left", "trapezoid")
ROUGH_RULES = ("phi1", "compensated")
SPLIT_MODES = ("dichotomy", "trichotomy")


@dataclass(frozen=True, eq=False)
class LinearPart:
    A: np.ndarray

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise InvalidArgumentError(f"linear part must be square, got {A.shape}")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def n(self) -> int:
        return int(self.A.shape[0])

    @property
    def opnorm(self) -> float:
        return float(np.linalg.norm(self.A, 2))


def matrix_exponential(A: LinearPart, t: float) -> np.ndarray:
    return expm(t * A.A)


# ----------------------------
# Spectral splitting
# ----------------------------


@dataclass(frozen=True, eq=False)
class Splitting:
    """Invariant-subspace projections with their exponential bounds.

    Center/stable bounds follow |S^c(t)| <= Mc e^{gamma|t|} for t <= 0 and
    |S^s(t)| <= Ms e^{-beta t} for t >= 0. In trichotomy mode rho1 bounds the
    unstable growth backwards, rho2 = gamma and rho3 = beta.
    """

    A: np.ndarray
    Pc: np.ndarray
    Ps: np.ndarray
    Pu: Optional[np.ndarray]
    eigenvalues: np.ndarray
    center_tol: float
    mode: str
    gamma: float
    beta: float
    Mc: float = 1.0
    Ms: float = 1.0
    rho1: Optional[float] = None
    Mu: Optional[float] = None
    sampling: Dict[str, float] = field(default_factory=dict)

    @property
    def Ac(self) -> np.ndarray:
        return self.Pc @ self.A @ self.Pc

    @property
    def As(self) -> np.ndarray:
        return self.Ps @ self.A @ self.Ps

    @property
    def Au(self) -> Optional[np.ndarray]:
        return None if self.Pu is None else self.Pu @ self.A @ self.Pu

    @property
    def rho2(self) -> float:
        return self.gamma

    @property
    def rho3(self) -> float:
        return self.beta

    @property
    def center_dim(self) -> int:
        return int(round(np.trace(self.Pc)))

    @property
    def stable_dim(self) -> int:
        return int(round(np.trace(self.Ps)))

    def center_group(self, t: float) -> np.ndarray:
        return expm(t * self.Ac) @ self.Pc

    def stable_group(self, t: float) -> np.ndarray:
        return expm(t * self.As) @ self.Ps

    def center_basis(self) -> np.ndarray:
        """Orthonormal basis of X^c as columns."""
        return _range_basis(self.Pc)

    def to_dict(self) -> Dict[str, object]:
        payload: Dict[str, object] = {
            "mode": self.mode,
            "A": self.A.tolist(),
            "Pc": self.Pc.tolist(),
            "Ps": self.Ps.tolist(),
            "Pu": None if self.Pu is None else self.Pu.tolist(),
            "center_tol": self.center_tol,
            "gamma": self.gamma,
            "beta": self.beta,
            "Mc": self.Mc,
            "Ms": self.Ms,
            "sampling": dict(self.sampling),
        }
        if self.mode == "trichotomy":
            payload.update({"rho1": self.rho1, "rho2": self.rho2, "rho3": self.rho3, "Mu": self.Mu})
        return payload


def _range_basis(P: np.ndarray) -> np.ndarray:
    u, s, _ = np.linalg.svd(P)
    rank = int(np.sum(s > 1e-8))
    return u[:, :rank]


def _invariant_projector(A: np.ndarray, shift: float, sort: str) -> Tuple[np.ndarray, int]:
    """Spectral projector onto the eigenvalues selected by `sort` for A + shift*Id.

    Reordered real Schur form A = Z T Z^T puts the selected block first; the
    complementary invariant subspace comes from T11 Y - Y T22 = -T12.
    """
    n = A.shape[0]
    T, Z, sdim = schur(A + shift * np.eye(n), output="real", sort=sort)
    if sdim == 0:
        return np.zeros((n, n)), 0
    if sdim == n:
        return np.eye(n), n
    T11, T12, T22 = T[:sdim, :sdim], T[:sdim, sdim:], T[sdim:, sdim:]
    Y = solve_sylvester(T11, -T22, -T12)
    block = np.zeros((n, n))
    block[:sdim, :sdim] = np.eye(sdim)
    block[:sdim, sdim:] = -Y
    return Z @ block @ Z.T, int(sdim)


def spectral_split(
    A: LinearPart,
    center_tol: float | None = None,
    mode: str = "dichotomy",
    beta_margin: float | None = None,
    fit_constants: bool = True,
) -> Splitting:
    if mode not in SPLIT_MODES:
        raise InvalidArgumentError(f"unknown split mode {mode!r}; use one of {SPLIT_MODES}")
    tol = config.CENTER_TOL if center_tol is None else center_tol
    margin = config.BETA_MARGIN if beta_margin is None else beta_margin
    M = A.A
    n = A.n
    eig = np.linalg.eigvals(M)
    real = eig.real
    unstable = real > tol
    stable = real < -tol
    if mode == "dichotomy" and np.any(unstable):
        raise SpectrumViolationError(
            f"eigenvalues {eig[unstable]} have positive real part; use trichotomy mode"
        )
    if not np.any(stable):
        raise SpectrumViolationError("no stable eigenvalues: there is nothing to split off")
    center = ~(unstable | stable)
    if not np.any(center):
        raise SpectrumViolationError("no eigenvalues on the center band")

    Ps, _ = _invariant_projector(M, tol, "lhp")
    Pu = None
    if mode == "trichotomy":
        Pu, _ = _invariant_projector(M, -tol, "rhp")
    Pc = np.eye(n) - Ps - (0 if Pu is None else Pu)

    gamma = float(np.ceil(np.max(np.abs(real[center])) / tol) * tol) if tol > 0 else 0.0
    beta = float(np.min(-real[stable]) * (1.0 - margin))
    rho1 = float(np.min(real[unstable]) * (1.0 - margin)) if np.any(unstable) else None
    if mode == "trichotomy" and rho1 is None:
        rho1 = np.inf
    split = Splitting(
        A=M.copy(), Pc=Pc, Ps=Ps, Pu=Pu, eigenvalues=eig, center_tol=tol, mode=mode,
        gamma=gamma, beta=beta, rho1=rho1,
    )
    if gamma >= beta:
        raise SpectrumViolationError(f"no spectral gap: gamma={gamma} >= beta={beta}")
    logger.info(
        "spectral split (%s): dim c=%d s=%d, gamma=%.3g beta=%.3g",
        mode, split.center_dim, split.stable_dim, gamma, beta,
    )
    if fit_constants:
        split = dichotomy_constants(split, A, config.DICHOTOMY_HORIZON, config.DICHOTOMY_SAMPLES)
    return split


def _sampled_sup(generator: np.ndarray, P: np.ndarray, rate: float, horizon: float, samples: int) -> float:
    """sup over t in [0, horizon] of |e^{t G} P| e^{rate t}, stepping by repeated products."""
    times = np.linspace(0.0, horizon, samples)
    step = expm((times[1] - times[0]) * generator)
    current = P.copy()
    best = np.linalg.norm(current, 2)
    for t in times[1:]:
        current = step @ current
        best = max(best, np.linalg.norm(current, 2) * np.exp(rate * t))
    return float(best)


def dichotomy_constants(
    split: Splitting, A: LinearPart, horizon: float, samples: int
) -> Splitting:
    """Fit Mc, Ms (and Mu) by dense time sampling; each is at least 1."""
    if samples < 2 or horizon <= 0:
        raise InvalidArgumentError("dichotomy sampling needs samples >= 2 and horizon > 0")
    Mc = _sampled_sup(-split.Ac, split.Pc, split.gamma, horizon, samples)
    if split.mode == "trichotomy":
        Mc = max(Mc, _sampled_sup(split.Ac, split.Pc, -split.gamma, horizon, samples))
    Ms = _sampled_sup(split.As, split.Ps, split.beta, horizon, samples)
    Mu = None
    if split.Pu is not None and np.any(split.Pu):
        Mu = max(1.0, _sampled_sup(-split.Au, split.Pu, split.rho1, horizon, samples))
    elif split.Pu is not None:
        Mu = 1.0
    fitted = replace(
        split,
        Mc=max(1.0, Mc),
        Ms=max(1.0, Ms),
        Mu=Mu,
        sampling={"horizon": float(horizon), "samples": int(samples)},
    )
    logger.info("dichotomy constants: Mc=%.6g Ms=%.6g Mu=%s", fitted.Mc, fitted.Ms, Mu)
    return fitted


def semigroup_constant(A: LinearPart, alpha: float, points: int = 65) -> float:
    """C_S := max over basis vectors e of |e| + sup |S(t)e - S(s)e| / (t - s)^{2 alpha} on [0, 1]."""
    times = np.linspace(0.0, 1.0, points)
    orbits = np.stack([expm(t * A.A) for t in times])
    best = 0.0
    for j in range(A.n):
        path = orbits[:, :, j]
        holder = float(increment_holder(path, times, 2 * alpha, "all-pairs"))
        best = max(best, 1.0 + holder)
    logger.info("semigroup constant C_S=%.6g (alpha=%.3g)", best, alpha)
    return best


# ----------------------------
# Convolutions
# ----------------------------


@dataclass(frozen=True)
class StepPropagator:
    S: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray


class Propagators:
    """Per-step S(h), phi1(hA), phi2(hA), each from one augmented exponential."""

    def __init__(self, A: np.ndarray):
        self.A = np.asarray(A, dtype=float)
        self._cache: Dict[float, StepPropagator] = {}

    def step(self, h: float) -> StepPropagator:
        key = round(float(h), 14)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        n = self.A.shape[0]
        M = np.zeros((3 * n, 3 * n))
        M[:n, :n] = h * self.A
        M[:n, n : 2 * n] = np.eye(n)
        M[n : 2 * n, 2 * n :] = np.eye(n)
        E = expm(M)
        prop = StepPropagator(E[:n, :n], E[:n, n : 2 * n], E[:n, 2 * n :])
        self._cache[key] = prop
        return prop

    def at(self, times: np.ndarray) -> np.ndarray:
        """S(t) for each t, stacked."""
        return np.stack([expm(t * self.A) for t in times])


def convolve_drift_values(
    props: Propagators,
    times: np.ndarray,
    forcing: np.ndarray,
    start: np.ndarray,
    rule: str = "left",
) -> np.ndarray:
    """S(t - t0) start + int_{t0}^t S(t - r) F_r dr on the grid.

    `forcing` is (n, *batch, m); `start` is (*batch, m). The left rule freezes
    F on each cell; the trapezoid rule interpolates it linearly.
    """
    if rule not in DRIFT_RULES:
        raise InvalidArgumentError(f"unknown drift rule {rule!r}; use one of {DRIFT_RULES}")
    steps = np.diff(times)
    out = np.empty(forcing.shape[:1] + np.shape(start))
    out[0] = start
    for j, h in enumerate(steps):
        p = props.step(h)
        if rule == "left":
            increment = forcing[j] @ (h * p.phi1).T
        else:
            increment = forcing[j] @ (h * (p.phi1 - p.phi2)).T + forcing[j + 1] @ (h * p.phi2).T
        out[j + 1] = out[j] @ p.S.T + increment
    return out


def convolve_rough_values(
    props: Propagators,
    times: np.ndarray,
    integrand: np.ndarray,
    derivative: np.ndarray,
    dw: np.ndarray,
    dww: np.ndarray,
    rule: str = "phi1",
) -> np.ndarray:
    """int_{t0}^t S(t - r) Y_r dW_r on the grid from the cells Y_j W_{j,j+1} + Y'_j WW_{j,j+1}.

    The compensated rule is sum_{t_j < t} S(t - t_j)(cell_j), carried as
    I_{j+1} = S(h)(I_j + cell_j). The phi1 rule spreads each cell over its
    step, I_{j+1} = S(h) I_j + phi1(hA) cell_j. `integrand` is (n, *batch, m, d),
    `derivative` (n, *batch, m, d, d), `dw` (n-1, *batch, d) and `dww`
    (n-1, *batch, d, d).
    """
    if rule not in ROUGH_RULES:
        raise InvalidArgumentError(f"unknown rough rule {rule!r}; use one of {ROUGH_RULES}")
    second = np.einsum("n...ab,n...ba->n...", derivative[:-1], dww[..., None, :, :])
    cells = contract_last(integrand[:-1], dw) + second
    steps = np.diff(times)
    out = np.zeros(integrand.shape[:-1])
    for j, h in enumerate(steps):
        p = props.step(h)
        if rule == "compensated":
            out[j + 1] = (out[j] + cells[j]) @ p.S.T
        else:
            out[j + 1] = out[j] @ p.S.T + cells[j] @ p.phi1.T
    return out


def semigroup_convolve_drift(
    A: LinearPart,
    F: SmoothCoefficient,
    cp: ControlledPath,
    xi: np.ndarray,
    rule: str = "left",
) -> ControlledPath:
    """t -> S(t) xi + int_0^t S(t - r) F(Y_r) dr with zero Gubinelli derivative."""
    grid = cp.grid
    times = grid.points - grid.t0
    forcing = F(cp.y.values)
    values = convolve_drift_values(Propagators(A.A), times, forcing, np.asarray(xi, dtype=float), rule)
    zero = np.zeros(values.shape + (cp.noise_dim,))
    drift = ControlledPath.from_arrays(grid, values, zero, cp.alpha)
    scale = A.opnorm * float(np.linalg.norm(xi)) + float(np.max(np.abs(forcing), initial=0.0))
    if scale > 0:
        holder = float(increment_holder(values, grid.points, 2 * cp.alpha, config.PAIR_POLICY))
        logger.info("drift convolution: 2a-Hölder / (|A||xi| + sup|F|) = %.4g", holder / scale)
    return drift


def semigroup_convolve_rough(
    A: LinearPart, cp: ControlledPath, rp: RoughPath, rule: str = "compensated"
) -> ControlledPath:
    """t -> int_0^t S(t - r) Y_r dW_r; the result's Gubinelli derivative is Y."""
    if not cp.grid.same_as(rp.grid):
        raise InvalidArgumentError("controlled path and rough path live on different grids")
    dw, dww = rp.adjacent
    times = cp.grid.points - cp.grid.t0
    values = convolve_rough_values(
        Propagators(A.A), times, cp.y.values, cp.gubinelli.values, dw, dww, rule
    )
    conv = ControlledPath.from_arrays(cp.grid, values, cp.y.values, cp.alpha)
    scale = controlled_norms(cp, rp).norm * (rp.w_norm() + rp.ww_norm())
    if scale > 0:
        logger.info(
            "rough convolution: |conv|_D / (|Y|_D (|W| + |WW|)) = %.4g",
            controlled_norms(conv, rp).norm / scale,
        )
    return conv
