from __future__ import annotations

import numpy as np
import pytest

from rough_manifold.controlled_calculus import ControlledPath, gubinelli_partial_sums
from rough_manifold.errors import InvalidArgumentError, SpectrumViolationError
from rough_manifold.grid_paths import SampledPath, make_uniform_grid
from rough_manifold.linear_flow import (
    LinearPart,
    Propagators,
    convolve_drift_values,
    dichotomy_constants,
    matrix_exponential,
    semigroup_constant,
    semigroup_convolve_drift,
    semigroup_convolve_rough,
    spectral_split,
)
from rough_manifold.registry import zero_drift
from rough_manifold.rough_lift import FbmSpec, lift_smooth, sample_fbm


def test_split_of_diagonal_system() -> None:
    split = spectral_split(LinearPart(np.diag([0.0, -1.0])))
    np.testing.assert_allclose(split.Pc, np.diag([1.0, 0.0]), atol=1e-12)
    np.testing.assert_allclose(split.Ps, np.diag([0.0, 1.0]), atol=1e-12)
    assert split.Pu is None
    assert split.gamma == 0.0
    assert split.beta == pytest.approx(0.9)
    assert split.Mc == pytest.approx(1.0)
    assert split.Ms == pytest.approx(1.0)
    assert split.center_dim == 1 and split.stable_dim == 1


def test_split_without_margin_keeps_full_rate() -> None:
    split = spectral_split(LinearPart(np.diag([0.0, -1.0])), beta_margin=0.0)
    assert split.beta == pytest.approx(1.0)


def test_non_normal_projections_commute_with_A() -> None:
    A = np.array([[0.0, 1.0], [0.0, -1.0]])
    split = spectral_split(LinearPart(A), fit_constants=False)
    np.testing.assert_allclose(split.Pc + split.Ps, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(split.Pc @ split.Pc, split.Pc, atol=1e-12)
    np.testing.assert_allclose(A @ split.Pc, split.Pc @ A, atol=1e-12)
    np.testing.assert_allclose(A @ split.Ps, split.Ps @ A, atol=1e-12)
    # kernel of A spans the center space
    np.testing.assert_allclose(A @ split.center_basis(), 0.0, atol=1e-12)


def test_dichotomy_rejects_unstable_spectrum() -> None:
    A = LinearPart(np.diag([2.0, 0.0, -3.0]))
    with pytest.raises(SpectrumViolationError):
        spectral_split(A)
    split = spectral_split(A, mode="trichotomy")
    np.testing.assert_allclose(split.Pu, np.diag([1.0, 0.0, 0.0]), atol=1e-12)
    np.testing.assert_allclose(split.Pc, np.diag([0.0, 1.0, 0.0]), atol=1e-12)
    assert split.rho1 == pytest.approx(1.8)
    assert split.rho3 == pytest.approx(2.7)
    assert split.Mu == pytest.approx(1.0)
    assert {"rho1", "rho2", "rho3", "Mu"} <= set(split.to_dict())


def test_split_needs_center_and_stable_parts() -> None:
    with pytest.raises(SpectrumViolationError):
        spectral_split(LinearPart(np.diag([-1.0, -2.0])))
    with pytest.raises(SpectrumViolationError):
        spectral_split(LinearPart(np.zeros((2, 2))))
    with pytest.raises(InvalidArgumentError):
        spectral_split(LinearPart(np.diag([0.0, -1.0])), mode="pentachotomy")
    with pytest.raises(InvalidArgumentError):
        LinearPart(np.zeros((2, 3)))


def test_phi_functions_at_zero() -> None:
    step = Propagators(np.zeros((2, 2))).step(0.25)
    np.testing.assert_allclose(step.S, np.eye(2))
    np.testing.assert_allclose(step.phi1, np.eye(2))
    np.testing.assert_allclose(step.phi2, 0.5 * np.eye(2))


def test_left_rule_exact_for_constant_forcing() -> None:
    times = np.linspace(0.0, 2.0, 33)
    props = Propagators(np.array([[-1.0]]))
    forcing = np.full((33, 1), 3.0)
    values = convolve_drift_values(props, times, forcing, np.array([2.0]))
    expected = 2.0 * np.exp(-times) + 3.0 * (1.0 - np.exp(-times))
    np.testing.assert_allclose(values[:, 0], expected, atol=1e-13)


def test_trapezoid_rule_exact_for_linear_forcing() -> None:
    times = np.linspace(0.0, 1.0, 17)
    props = Propagators(np.array([[-1.0]]))
    values = convolve_drift_values(props, times, times[:, None], np.zeros(1), rule="trapezoid")
    np.testing.assert_allclose(values[:, 0], times - 1.0 + np.exp(-times), atol=1e-13)
    with pytest.raises(InvalidArgumentError):
        convolve_drift_values(props, times, times[:, None], np.zeros(1), rule="simpson")


def test_rough_convolution_with_zero_generator_is_compensated_sum() -> None:
    grid = make_uniform_grid(65, 0.0, 1.0)
    rp = lift_smooth(sample_fbm(FbmSpec(0.5, 2, 11, grid)), 0.45)
    y = np.stack([rp.first.values, np.cos(rp.first.values)], axis=1)
    dy = np.zeros((65, 2, 2, 2))
    dy[:, 0] = np.eye(2)
    dy[:, 1] = -np.sin(rp.first.values)[:, :, None] * np.eye(2)
    cp = ControlledPath.from_arrays(grid, y, dy, rp.alpha)
    conv = semigroup_convolve_rough(LinearPart(np.zeros((2, 2))), cp, rp)
    np.testing.assert_allclose(conv.y.values, gubinelli_partial_sums(cp, rp), atol=1e-12)
    np.testing.assert_allclose(conv.gubinelli.values, y)


def _constant_integrand_on_a_line(n: int):
    grid = make_uniform_grid(n, 0.0, 2.0)
    rp = lift_smooth(SampledPath(grid, grid.points[:, None]), 0.45)
    y = np.ones((n, 2, 1))
    cp = ControlledPath.from_arrays(grid, y, np.zeros((n, 2, 1, 1)), rp.alpha)
    return grid, rp, cp


def test_rough_convolution_sums_semigroup_over_output_times() -> None:
    grid, rp, cp = _constant_integrand_on_a_line(33)
    A = LinearPart(np.diag([0.0, -1.0]))
    conv = semigroup_convolve_rough(A, cp, rp)
    h = grid.points[1] - grid.points[0]
    k = np.arange(grid.n)
    expected = h * np.exp(-h) * (1.0 - np.exp(-h * k)) / (1.0 - np.exp(-h))
    np.testing.assert_allclose(conv.y.values[:, 0], grid.points, atol=1e-12)
    np.testing.assert_allclose(conv.y.values[:, 1], expected, atol=1e-12)
    np.testing.assert_allclose(conv.gubinelli.values, cp.y.values)
    exact = 1.0 - np.exp(-grid.points)
    assert np.max(np.abs(conv.y.values[:, 1] - exact)) < h


def test_rough_convolution_phi1_rule_is_exact_for_linear_noise() -> None:
    grid, rp, cp = _constant_integrand_on_a_line(17)
    conv = semigroup_convolve_rough(LinearPart(np.diag([0.0, -1.0])), cp, rp, rule="phi1")
    np.testing.assert_allclose(conv.y.values[:, 1], 1.0 - np.exp(-grid.points), atol=1e-12)
    with pytest.raises(InvalidArgumentError):
        semigroup_convolve_rough(LinearPart(np.zeros((2, 2))), cp, rp, rule="midpoint")


def test_rough_convolution_error_shrinks_with_mesh() -> None:
    errors = []
    for n in (9, 33, 129):
        grid, rp, cp = _constant_integrand_on_a_line(n)
        conv = semigroup_convolve_rough(LinearPart(np.diag([0.0, -1.0])), cp, rp)
        errors.append(abs(conv.y.values[-1, 1] - (1.0 - np.exp(-2.0))))
    assert errors[0] > errors[1] > errors[2]


def test_semigroup_constant() -> None:
    assert semigroup_constant(LinearPart(np.zeros((2, 2))), 0.45) == pytest.approx(1.0)
    assert semigroup_constant(LinearPart(np.diag([0.0, -1.0])), 0.45) > 1.0


def test_matrix_exponential_of_rotation() -> None:
    A = LinearPart(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    np.testing.assert_allclose(matrix_exponential(A, np.pi / 2), A.A, atol=1e-12)
    np.testing.assert_allclose(matrix_exponential(A, 0.0), np.eye(2))


def test_dichotomy_constants_of_non_normal_system() -> None:
    A = LinearPart(np.array([[0.0, 1.0], [0.0, -1.0]]))
    split = dichotomy_constants(spectral_split(A, fit_constants=False), A, 5.0, 501)
    # both projections have norm sqrt(2) and the restricted flows are exactly 1 and e^{-t}
    assert split.Mc == pytest.approx(np.sqrt(2.0))
    assert split.Ms == pytest.approx(np.sqrt(2.0))
    assert split.sampling == {"horizon": 5.0, "samples": 501}
    with pytest.raises(InvalidArgumentError):
        dichotomy_constants(split, A, 5.0, 1)


def test_drift_convolution_without_forcing_is_the_semigroup() -> None:
    grid = make_uniform_grid(33, 0.0, 1.0)
    A = LinearPart(np.diag([0.0, -1.0]))
    cp = ControlledPath.constant(grid, np.zeros(2), np.zeros((2, 1)), 0.45)
    drift = semigroup_convolve_drift(A, zero_drift(2), cp, np.array([1.0, 1.0]))
    np.testing.assert_allclose(drift.y.values[:, 0], 1.0)
    np.testing.assert_allclose(drift.y.values[:, 1], np.exp(-grid.points), atol=1e-13)
    assert not np.any(drift.gubinelli.values)
