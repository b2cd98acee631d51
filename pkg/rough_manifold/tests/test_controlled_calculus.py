from __future__ import annotations

import numpy as np
import pytest

from rough_manifold import config
from rough_manifold.controlled_calculus import (
    ControlledPath,
    CutoffFunction,
    SmoothCoefficient,
    compose_smooth,
    controlled_norms,
    cutoff,
    gubinelli_integral,
    gubinelli_partial_sums,
    lipschitz_gap_bound,
    sewing_constant,
    truncation_factor,
)
from rough_manifold.errors import InvalidArgumentError
from rough_manifold.grid_paths import make_uniform_grid
from rough_manifold.registry import cubic_saturated, linear_coefficient, quadratic_coupling
from rough_manifold.rough_lift import FbmSpec, lift_smooth, sample_fbm


def _noise(n: int = 64, d: int = 2, seed: int = 4):
    path = sample_fbm(FbmSpec(0.5, d, seed, make_uniform_grid(n + 1, 0.0, 1.0)))
    return lift_smooth(path, 0.45)


def test_integral_of_noise_against_itself_is_second_level() -> None:
    rp = _noise()
    n, d = rp.grid.n, rp.dim
    cp = ControlledPath.from_arrays(
        rp.grid, rp.first.values, np.broadcast_to(np.eye(d), (n, d, d)), rp.alpha
    )
    value = gubinelli_integral(cp, rp, 0.0, 1.0, product="outer")
    np.testing.assert_allclose(value, rp.second.at(0.0, 1.0), atol=1e-12)


def test_constant_integrand_gives_increment() -> None:
    rp = _noise()
    c = np.array([[1.0, -2.0], [0.5, 3.0], [0.0, 1.0]])
    cp = ControlledPath.constant(rp.grid, c, np.zeros((3, 2, 2)), rp.alpha)
    value = gubinelli_integral(cp, rp, 0.25, 0.75)
    np.testing.assert_allclose(value, c @ rp.first.increment(0.25, 0.75), atol=1e-13)
    sums = gubinelli_partial_sums(cp, rp)
    np.testing.assert_allclose(sums[-1], c @ rp.first.values[-1], atol=1e-13)
    np.testing.assert_array_equal(sums[0], np.zeros(3))


def test_integral_rejects_reversed_bounds_and_misaligned_grid() -> None:
    rp = _noise()
    cp = ControlledPath.constant(rp.grid, np.ones(2), np.zeros((2, 2)), rp.alpha)
    with pytest.raises(InvalidArgumentError):
        gubinelli_integral(cp, rp, 0.75, 0.25)
    other = _noise(n=32)
    with pytest.raises(InvalidArgumentError):
        gubinelli_integral(cp, other, 0.0, 1.0)


def test_constant_path_norms() -> None:
    rp = _noise()
    cp = ControlledPath.constant(rp.grid, np.array([3.0, 4.0]), np.zeros((2, 2)), rp.alpha)
    norms = controlled_norms(cp, rp)
    # constant Y has zero remainder once Y' = 0
    assert norms.seminorm == pytest.approx(0.0)
    assert norms.norm == pytest.approx(5.0)


def test_composition_preserves_shapes_and_zero() -> None:
    rp = _noise(d=1)
    G = cubic_saturated(2, 1, 0.5)
    zero = ControlledPath.constant(rp.grid, np.zeros(2), np.zeros((2, 1)), rp.alpha)
    composed = compose_smooth(G, zero)
    assert composed.y.shape == (2, 1)
    assert composed.gubinelli.shape == (2, 1, 1)
    np.testing.assert_array_equal(composed.y.values, 0.0)


def test_cutoff_function_plateau_and_support() -> None:
    f = CutoffFunction()
    assert f(0.2) == 1.0
    assert f(0.5) == 1.0
    assert f(1.0) == 0.0
    assert 0.0 < f(0.75) < 1.0
    assert f.derivative_bound(order=1) > 0.0
    with pytest.raises(InvalidArgumentError):
        CutoffFunction(plateau=1.0, support=0.5)


def test_cutoff_scales_large_paths_only() -> None:
    rp = _noise()
    f = CutoffFunction()
    small = ControlledPath.constant(rp.grid, np.array([0.01, 0.0]), np.zeros((2, 2)), rp.alpha)
    big = ControlledPath.constant(rp.grid, np.array([10.0, 0.0]), np.zeros((2, 2)), rp.alpha)
    assert cutoff(small, rp, 1.0, f) is small
    np.testing.assert_array_equal(cutoff(big, rp, 1.0, f).y.values, 0.0)
    with pytest.raises(InvalidArgumentError):
        truncation_factor(0.5, 0.0, f)


def test_lipschitz_gap_bound_for_quadratic_drift() -> None:
    F = quadratic_coupling()
    rng = np.random.default_rng(2)
    for _ in range(50):
        x, y = rng.uniform(-1.0, 1.0, size=(2, 2))
        assert lipschitz_gap_bound(F, x, y) >= np.linalg.norm(F(x) - F(y))


def test_lipschitz_gap_bound_needs_flat_coefficient() -> None:
    with pytest.raises(InvalidArgumentError):
        lipschitz_gap_bound(linear_coefficient(np.eye(2)), np.ones(2), np.zeros(2))


def test_false_flag_rejected_in_strict_mode(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(config, "STRICT_FLAGS", True)
    with pytest.raises(InvalidArgumentError):
        SmoothCoefficient(
            name="shifted",
            func=lambda x: x + 1.0,
            jacobian=lambda x: np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)),
            input_dim=2,
            output_shape=(2,),
            vanishes_at_zero=True,
        )


def test_sewing_constant() -> None:
    assert sewing_constant(0.45) == pytest.approx(1.0 / (1.0 - 2.0 ** (-0.35)))
