"""Random center manifolds for semilinear rough differential equations driven by fBm."""

from . import schemas  # noqa: F401
from .lp_manifold import (  # noqa: F401
    LpOptions,
    gap_constant,
    lp_fixed_point,
    manifold_graph,
    verify_invariance,
)
from .rde_solver import SolveOptions, solve_rde  # noqa: F401
from .registry import resolve_system  # noqa: F401
from .rough_lift import sample_two_sided  # noqa: F401
from .run import ExperimentConfig, run  # noqa: F401

__all__ = [
    "schemas",
    "LpOptions",
    "gap_constant",
    "lp_fixed_point",
    "manifold_graph",
    "verify_invariance",
    "SolveOptions",
    "solve_rde",
    "resolve_system",
    "sample_two_sided",
    "ExperimentConfig",
    "run",
]
