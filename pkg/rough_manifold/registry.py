"""Named test systems: linear part A, drift F and diffusion G."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .controlled_calculus import SmoothCoefficient
from .errors import ConfigError
from .linear_flow import LinearPart

DEFAULT_DIFFUSION_SCALE = 0.5


@dataclass(frozen=True, eq=False)
class SystemSpec:
    name: str
    A: LinearPart
    F: SmoothCoefficient
    G: SmoothCoefficient
    description: str = ""
    # known graph xi -> h(xi) near 0, for oracle checks
    graph_oracle: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def state_dim(self) -> int:
        return self.A.n

    @property
    def noise_dim(self) -> int:
        return int(self.G.output_shape[-1])

    @property
    def CF(self) -> float:
        return float(self.F.gap_constant or 0.0)

    @property
    def CG(self) -> float:
        return float(self.G.gap_constant or 0.0)


# ----------------------------
# Coefficient factories
# ----------------------------


def zero_drift(m: int) -> SmoothCoefficient:
    return SmoothCoefficient(
        name="zero",
        func=lambda x: np.zeros_like(x),
        jacobian=lambda x: np.zeros(x.shape + (m,)),
        input_dim=m,
        output_shape=(m,),
        hessian=lambda x: np.zeros(x.shape + (m, m)),
        bounds=(0.0, 0.0, 0.0),
        gap_constant=0.0,
        vanishes_at_zero=True,
        flat_at_zero=True,
        second_flat_at_zero=True,
    )


def zero_diffusion(m: int, d: int) -> SmoothCoefficient:
    return SmoothCoefficient(
        name="zero",
        func=lambda x: np.zeros(x.shape[:-1] + (m, d)),
        jacobian=lambda x: np.zeros(x.shape[:-1] + (m, d, m)),
        input_dim=m,
        output_shape=(m, d),
        hessian=lambda x: np.zeros(x.shape[:-1] + (m, d, m, m)),
        bounds=(0.0, 0.0, 0.0),
        gap_constant=0.0,
        vanishes_at_zero=True,
        flat_at_zero=True,
        second_flat_at_zero=True,
    )


def linear_coefficient(B: np.ndarray, name: str = "linear") -> SmoothCoefficient:
    """x -> B x; B has shape (*output_shape, m)."""
    B = np.asarray(B, dtype=float)
    m = B.shape[-1]
    out = B.shape[:-1]
    return SmoothCoefficient(
        name=name,
        func=lambda x: _apply_linear(B, x),
        jacobian=lambda x: np.broadcast_to(B, x.shape[:-1] + B.shape),
        input_dim=m,
        output_shape=tuple(out),
        hessian=lambda x: np.zeros(x.shape[:-1] + B.shape + (m,)),
        bounds=(float(np.linalg.norm(B)), float(np.linalg.norm(B)), float(np.linalg.norm(B))),
        vanishes_at_zero=True,
    )


def _apply_linear(B: np.ndarray, x: np.ndarray) -> np.ndarray:
    flat = B.reshape(-1, B.shape[-1])
    return (x @ flat.T).reshape(x.shape[:-1] + B.shape[:-1])


def quadratic_coupling() -> SmoothCoefficient:
    """F(x, y) = (x y, x^2)."""

    def func(u: np.ndarray) -> np.ndarray:
        x, y = u[..., 0], u[..., 1]
        return np.stack([x * y, x * x], axis=-1)

    def jacobian(u: np.ndarray) -> np.ndarray:
        x, y = u[..., 0], u[..., 1]
        zero = np.zeros_like(x)
        return np.stack([np.stack([y, x], axis=-1), np.stack([2 * x, zero], axis=-1)], axis=-2)

    def hessian(u: np.ndarray) -> np.ndarray:
        H = np.zeros((2, 2, 2))
        H[0, 0, 1] = H[0, 1, 0] = 1.0
        H[1, 0, 0] = 2.0
        return np.broadcast_to(H, u.shape[:-1] + (2, 2, 2))

    return SmoothCoefficient(
        name="quadratic-coupling",
        func=func,
        jacobian=jacobian,
        input_dim=2,
        output_shape=(2,),
        hessian=hessian,
        # |DF(z)| <= |DF(z)|_F <= sqrt(5)|z|; C2 bound on the unit ball
        bounds=(np.sqrt(5.0), np.sqrt(6.0), 0.0),
        gap_constant=float(np.sqrt(5.0)),
        vanishes_at_zero=True,
        flat_at_zero=True,
    )


def _saturated(u: np.ndarray) -> np.ndarray:
    return u ** 3 / (1 + u * u) ** 2


def _saturated_d1(u: np.ndarray) -> np.ndarray:
    return (3 * u * u - u ** 4) / (1 + u * u) ** 3


def _saturated_d2(u: np.ndarray) -> np.ndarray:
    return (6 * u - 16 * u ** 3 + 2 * u ** 5) / (1 + u * u) ** 4


def cubic_saturated(m: int, d: int = 1, scale: float = DEFAULT_DIFFUSION_SCALE) -> SmoothCoefficient:
    """G(u)[k, :] = scale * u_k^3 / (1 + u_k^2)^2 on every noise column."""

    def func(u: np.ndarray) -> np.ndarray:
        values = scale * _saturated(u)
        return np.repeat(values[..., None], d, axis=-1)

    def jacobian(u: np.ndarray) -> np.ndarray:
        diag = scale * _saturated_d1(u)
        eye = np.eye(m)
        jac = diag[..., :, None] * eye
        return np.repeat(jac[..., :, None, :], d, axis=-2)

    def hessian(u: np.ndarray) -> np.ndarray:
        diag = scale * _saturated_d2(u)
        cube = np.zeros((m, m, m))
        cube[np.arange(m), np.arange(m), np.arange(m)] = 1.0
        hess = diag[..., :, None, None] * cube
        return np.repeat(hess[..., :, None, :, :], d, axis=-3)

    return SmoothCoefficient(
        name="cubic-saturated",
        func=func,
        jacobian=jacobian,
        input_dim=m,
        output_shape=(m, d),
        hessian=hessian,
        bounds=(scale * 0.75, scale * 2.0, scale * 6.0),
        # |g'(u)| <= 3u^2 on the unit ball
        gap_constant=3.0 * scale * np.sqrt(d),
        vanishes_at_zero=True,
        flat_at_zero=True,
        second_flat_at_zero=True,
    )


DRIFTS: Dict[str, Callable[..., SmoothCoefficient]] = {
    "zero": lambda m, **_: zero_drift(m),
    "quadratic-coupling": lambda m, **_: quadratic_coupling(),
}

DIFFUSIONS: Dict[str, Callable[..., SmoothCoefficient]] = {
    "zero": lambda m, d=1, **_: zero_diffusion(m, d),
    "cubic-saturated": lambda m, d=1, scale=DEFAULT_DIFFUSION_SCALE, **_: cubic_saturated(m, d, scale),
}


def _center_stable_A() -> LinearPart:
    return LinearPart(np.diag([0.0, -1.0]))


def linear_system() -> SystemSpec:
    return SystemSpec("linear", _center_stable_A(), zero_drift(2), zero_diffusion(2, 1), "F = G = 0")


def det_oracle_system() -> SystemSpec:
    return SystemSpec(
        "det-oracle",
        _center_stable_A(),
        quadratic_coupling(),
        zero_diffusion(2, 1),
        "x' = x y, y' = -y + x^2",
        graph_oracle=oracle_graph,
    )


def oracle_graph(xi: np.ndarray) -> np.ndarray:
    """(x, 0) -> (0, x^2 - 2x^4 + 12x^6), the series solving h'(x) x h(x) = x^2 - h(x)."""
    x = float(np.asarray(xi, dtype=float)[0])
    return np.array([0.0, x ** 2 - 2.0 * x ** 4 + 12.0 * x ** 6])


def rough_oracle_system(scale: float = DEFAULT_DIFFUSION_SCALE) -> SystemSpec:
    return SystemSpec(
        "rough-oracle",
        _center_stable_A(),
        quadratic_coupling(),
        cubic_saturated(2, 1, scale),
        "det-oracle drift with cubic-saturated 2x1 diffusion",
    )


SYSTEMS: Dict[str, Callable[..., SystemSpec]] = {
    "linear": lambda **_: linear_system(),
    "det-oracle": lambda **_: det_oracle_system(),
    "rough-oracle": lambda diffusion_scale=DEFAULT_DIFFUSION_SCALE, **_: rough_oracle_system(
        diffusion_scale
    ),
}


def resolve_system(
    name: str | None = None,
    inline: Mapping[str, object] | None = None,
    diffusion_scale: float = DEFAULT_DIFFUSION_SCALE,
) -> SystemSpec:
    """Registry lookup, or an inline {A, drift, diffusion, noise_dim} spec."""
    if inline:
        missing = {"A", "drift", "diffusion"} - set(inline)
        if missing:
            raise ConfigError(f"inline system spec missing keys: {sorted(missing)}")
        A = LinearPart(np.asarray(inline["A"], dtype=float))
        d = int(inline.get("noise_dim", 1))
        drift, diffusion = str(inline["drift"]), str(inline["diffusion"])
        if drift not in DRIFTS:
            raise ConfigError(f"unknown drift {drift!r}; known: {sorted(DRIFTS)}")
        if diffusion not in DIFFUSIONS:
            raise ConfigError(f"unknown diffusion {diffusion!r}; known: {sorted(DIFFUSIONS)}")
        F = DRIFTS[drift](A.n)
        G = DIFFUSIONS[diffusion](A.n, d=d, scale=diffusion_scale)
        if F.input_dim != A.n or G.input_dim != A.n:
            raise ConfigError(f"coefficients do not act on a {A.n}-dimensional state")
        return SystemSpec(name or "inline", A, F, G, "inline")
    if name not in SYSTEMS:
        raise ConfigError(f"unknown system {name!r}; known: {sorted(SYSTEMS)}")
    return SYSTEMS[name](diffusion_scale=diffusion_scale)
