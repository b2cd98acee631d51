from __future__ import annotations

import numpy as np
import pytest

from rough_manifold.errors import ConvergenceFailure, GapViolationError, InvalidArgumentError, InvalidSplitError
from rough_manifold.linear_flow import LinearPart, spectral_split
from rough_manifold.lp_manifold import (
    LpOptions,
    LyapunovPerronMap,
    TemperedRadius,
    center_recovery_error,
    chart_radius,
    contraction_probe,
    gap_constant,
    gap_constants_from_bounds,
    gap_lhs,
    graph_series,
    lp_fixed_point,
    lp_map_apply,
    manifold_graph,
    rebase_chart,
    tangency_check,
    tempered_radius,
    trichotomy_gap_constant,
    trichotomy_gap_lhs,
    verify_invariance,
)
from rough_manifold.registry import det_oracle_system, linear_system, oracle_graph, rough_oracle_system
from rough_manifold.rough_lift import sample_two_sided


def _noise(horizon: int = 8, steps_per_unit: int = 32, seed: int = 0, d: int = 1):
    return sample_two_sided(0.5, d, seed, horizon, steps_per_unit)


@pytest.fixture(scope="module")
def oracle_chart():
    system = det_oracle_system()
    split = spectral_split(system.A, beta_margin=0.0)
    rp = _noise(horizon=16, steps_per_unit=256)
    opts = LpOptions(window=16, tol=1e-14, drift_rule="trapezoid")
    return lp_fixed_point(rp, np.zeros(2), split, system.F, system.G, opts)


# ----------------------------
# Gap condition
# ----------------------------


def test_closed_form_K_for_unit_constants() -> None:
    gap = gap_constants_from_bounds(1.0, 0.0, 1.0, 1.0, 1.0)
    assert gap.K_closed_form == pytest.approx(0.013883, abs=1e-6)
    assert gap.eta == pytest.approx(-0.5)
    # the closed form overshoots the 1/4 budget, so the used K is capped
    assert gap.K_closed_form * gap_lhs(1.0, 1.0, 0.0, 1.0, 1.0, 1.0, -0.5) > 0.25
    assert gap.K < gap.K_closed_form
    assert gap.lhs < 0.25 and gap.valid


def test_explicit_K_can_violate_the_gap() -> None:
    gap = gap_constants_from_bounds(1.0, 0.0, 1.0, 1.0, 1.0, K=0.013883)
    assert not gap.valid
    assert gap.lhs == pytest.approx(0.3082, abs=1e-3)


def test_gap_constant_rejects_bad_bounds() -> None:
    with pytest.raises(InvalidSplitError):
        gap_constants_from_bounds(1.0, 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(InvalidSplitError):
        gap_constants_from_bounds(1.0, 0.0, 1.0, 1.0, 1.0, eta=0.5)
    with pytest.raises(InvalidArgumentError):
        gap_constants_from_bounds(0.5, 0.0, 1.0, 1.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        gap_constants_from_bounds(1.0, 0.0, 1.0, 1.0, 0.0)


def test_gap_constant_from_split() -> None:
    split = spectral_split(LinearPart(np.diag([0.0, -1.0])), beta_margin=0.0)
    gap = gap_constant(split, 1.0)
    assert gap.K_closed_form == pytest.approx(0.013883, abs=1e-6)
    assert gap.to_dict()["convention"] == "dichotomy"


def test_trichotomy_left_side_unit_case() -> None:
    lhs = trichotomy_gap_lhs(1.0, 1.0, 0.0, 1.0, 3.0, 1.0, 1.0, Mu=1.0, rho1=2.0)
    assert lhs == pytest.approx(23.454, abs=2e-3)
    assert 1.0 / (4.0 * lhs) == pytest.approx(0.01066, abs=1e-5)


def test_negative_eta_convention_reduces_to_dichotomy() -> None:
    for K, eta in ((0.01, -0.5), (0.002, -0.2)):
        negative = trichotomy_gap_lhs(K, 1.3, 0.0, 1.1, 1.0, 2.0, eta, convention="negative-eta")
        assert negative == gap_lhs(K, 1.3, 0.0, 1.1, 1.0, 2.0, eta)
    with pytest.raises(InvalidArgumentError):
        trichotomy_gap_lhs(1.0, 1.0, 0.0, 1.0, 1.0, 1.0, -0.5, convention="chapter")


def test_trichotomy_gap_constant_from_split() -> None:
    split = spectral_split(LinearPart(np.diag([2.0, 0.0, -3.0])), mode="trichotomy", beta_margin=0.0)
    gap = trichotomy_gap_constant(split, 1.0)
    assert gap.eta == pytest.approx(1.0)
    assert gap.K_closed_form == pytest.approx(0.01066, rel=2e-3)
    assert gap.valid and gap.convention == "positive-eta"
    negative = trichotomy_gap_constant(split, 1.0, convention="negative-eta")
    assert negative.eta < 0.0
    with pytest.raises(InvalidSplitError):
        trichotomy_gap_constant(split, 1.0, eta=2.5)


# ----------------------------
# Radius
# ----------------------------


def test_tempered_radius_formula() -> None:
    assert tempered_radius(0.01, 1.0, 1.0, 1.0, 1.0) == pytest.approx(0.002)
    assert tempered_radius(10.0, 1.0, 0.0, 5.0, 5.0) == 1.0
    with pytest.raises(InvalidArgumentError):
        tempered_radius(0.01, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        tempered_radius(0.0, 1.0, 1.0, 1.0, 1.0)


def test_chart_radius() -> None:
    assert chart_radius(float("inf"), 2.0, -0.5) == float("inf")
    assert chart_radius(0.01, 2.0, -0.5) == pytest.approx(0.01 / (4.0 * np.exp(0.5)))


# ----------------------------
# The map
# ----------------------------


def test_linear_map_propagates_center_vector() -> None:
    system = linear_system()
    split = spectral_split(system.A)
    rp = _noise()
    lp_map = LyapunovPerronMap(rp, split, system.F, system.G, window=4)
    xi = np.array([0.3, 0.0])
    image = lp_map_apply(rp, lp_map.zero_sequence(), xi, split, system.F, system.G)
    np.testing.assert_allclose(image.values[..., 0], 0.3, atol=1e-14)
    np.testing.assert_allclose(image.values[..., 1], 0.0, atol=1e-14)
    with pytest.raises(InvalidArgumentError):
        lp_map.center_vector(np.array([0.0, 1.0]))


def test_map_rejects_bad_setup() -> None:
    system = linear_system()
    split = spectral_split(system.A)
    rp = _noise(horizon=4)
    with pytest.raises(InvalidArgumentError):
        LyapunovPerronMap(rp, split, system.F, system.G, window=6)
    with pytest.raises(InvalidArgumentError):
        LyapunovPerronMap(rp, split, system.F, system.G, window=2, eta=0.1)
    with pytest.raises(InvalidArgumentError):
        LyapunovPerronMap(rp, split, system.F, system.G, window=0)


def test_tail_bound_shrinks_with_depth() -> None:
    system = linear_system()
    split = spectral_split(system.A)
    rp = _noise()
    short = LyapunovPerronMap(rp, split, system.F, system.G, window=8, tail_depth=2)
    long = LyapunovPerronMap(rp, split, system.F, system.G, window=8, tail_depth=4)
    assert long.tail_bound(1.0) / short.tail_bound(1.0) == pytest.approx(np.exp(-2.0 * split.beta))


def test_truncated_map_contracts() -> None:
    system = rough_oracle_system()
    split = spectral_split(system.A, beta_margin=0.0)
    gap = gap_constant(split, 1.0, K=0.013883)
    radius = TemperedRadius.from_gap(gap, system.F, system.G)
    rp = _noise(steps_per_unit=32, seed=4)
    lp_map = LyapunovPerronMap(rp, split, system.F, system.G, window=4, radius=radius)
    assert np.all(lp_map.radii > 0) and np.all(lp_map.radii <= 1.0)
    assert contraction_probe(lp_map, np.zeros(2), pairs=5) <= 0.30


# ----------------------------
# Charts
# ----------------------------


def test_linear_chart_is_flat() -> None:
    system = linear_system()
    split = spectral_split(system.A)
    chart = lp_fixed_point(_noise(), np.array([0.2, 0.0]), split, system.F, system.G, LpOptions(window=4))
    np.testing.assert_allclose(chart.h, 0.0, atol=1e-14)
    assert chart.rho == float("inf")
    assert center_recovery_error(chart) <= 1e-14
    np.testing.assert_allclose(manifold_graph(chart, np.array([-0.4, 0.0])), 0.0, atol=1e-14)


def test_oracle_chart_matches_series(oracle_chart) -> None:
    np.testing.assert_allclose(oracle_chart.h, 0.0, atol=1e-12)
    for x in (-0.1, -0.05, 0.05, 0.1):
        xi = np.array([x, 0.0])
        h = manifold_graph(oracle_chart, xi)
        assert abs(h[0]) <= 1e-12
        assert np.linalg.norm(h - oracle_graph(xi)) <= 5.0 * abs(x) ** 6


def test_oracle_chart_diagnostics(oracle_chart) -> None:
    diagnostics = oracle_chart.diagnostics
    assert diagnostics["contraction_factor"] < 1.0
    assert diagnostics["endpoint_mismatch"] <= 1e-12
    assert not diagnostics["outside_ball"]
    assert center_recovery_error(oracle_chart) <= 1e-12
    assert oracle_chart.to_dict()["window"] == 16


def test_graph_series_agrees_with_fixed_point(oracle_chart) -> None:
    xi = np.array([0.08, 0.0])
    h = manifold_graph(oracle_chart, xi)
    opts = LpOptions(window=16, tol=1e-14, drift_rule="trapezoid", lipschitz=oracle_chart.lipschitz)
    chart = lp_fixed_point(oracle_chart.rp, xi, oracle_chart.split, oracle_chart.lp_map.F, oracle_chart.lp_map.G, opts)
    np.testing.assert_allclose(chart.h, h, atol=1e-14)
    np.testing.assert_allclose(graph_series(chart), chart.h, atol=1e-12)


def test_tangency_at_origin(oracle_chart) -> None:
    report = tangency_check(oracle_chart, 1e-2)
    assert report.passed
    # h(x) ~ x^2, so half the second difference is close to 1
    assert report.half_second_differences[0][1] == pytest.approx(1.0, abs=1e-2)


def test_fixed_point_failure_carries_diagnostics() -> None:
    system = det_oracle_system()
    split = spectral_split(system.A)
    opts = LpOptions(window=4, tol=1e-300, max_iter=2, lipschitz=1.0)
    with pytest.raises(ConvergenceFailure) as info:
        lp_fixed_point(_noise(), np.array([0.1, 0.0]), split, system.F, system.G, opts)
    assert not isinstance(info.value, GapViolationError)
    assert len(info.value.diagnostics["updates"]) == 2


# ----------------------------
# Invariance
# ----------------------------


def test_linear_chart_is_invariant() -> None:
    system = linear_system()
    split = spectral_split(system.A)
    chart = lp_fixed_point(_noise(), np.array([0.2, 0.0]), split, system.F, system.G, LpOptions(window=4))
    report = verify_invariance(chart, 2, 1e-10)
    assert report.passed
    assert max(report.gaps) <= 1e-10
    assert report.ball_exits == []
    with pytest.raises(InvalidArgumentError):
        verify_invariance(chart, 0, 1e-10)


def test_oracle_chart_is_invariant() -> None:
    system = det_oracle_system()
    split = spectral_split(system.A, beta_margin=0.0)
    rp = _noise(horizon=16, steps_per_unit=64)
    opts = LpOptions(window=12, tol=1e-14, drift_rule="trapezoid")
    chart = lp_fixed_point(rp, np.array([0.05, 0.0]), split, system.F, system.G, opts)
    report = verify_invariance(chart, 2, 1e-6)
    assert report.passed
    assert max(report.intra_gaps) <= 1e-6


def test_rebase_reuses_lipschitz_constant() -> None:
    system = linear_system()
    split = spectral_split(system.A)
    chart = lp_fixed_point(_noise(), np.array([0.2, 0.0]), split, system.F, system.G, LpOptions(window=4))
    moved = rebase_chart(chart, 1.0, np.array([0.2, 0.0]))
    assert moved.lipschitz == chart.lipschitz
    assert moved.rp.grid.t0 == pytest.approx(chart.rp.grid.t0 - 1.0)
