from __future__ import annotations

import numpy as np
import pytest

from rough_manifold.errors import InvalidArgumentError
from rough_manifold.grid_paths import (
    ChenField,
    DenseField,
    SampledPath,
    TimeGrid,
    dyadic_constant,
    holder_seminorm,
    make_uniform_grid,
    pair_gaps,
    two_param_seminorm,
)


def test_grid_rejects_non_increasing_points() -> None:
    with pytest.raises(InvalidArgumentError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(InvalidArgumentError):
        TimeGrid(np.array([0.0]))


def test_index_of_and_anchor() -> None:
    grid = make_uniform_grid(9, -1.0, 1.0)
    assert grid.index_of(0.0) == 4
    assert grid.anchor_index() == 4
    assert grid.is_dyadic()
    with pytest.raises(InvalidArgumentError):
        grid.index_of(0.1)
    assert not grid.contains(0.1)


def test_sampled_path_shape_mismatch() -> None:
    grid = make_uniform_grid(5, 0.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        SampledPath(grid, np.zeros((4, 2)))


def test_holder_seminorm_of_linear_path() -> None:
    grid = make_uniform_grid(17, 0.0, 1.0)
    path = SampledPath(grid, 3.0 * grid.points)
    # |3(t - s)| / (t - s)^alpha peaks at the widest pair
    assert holder_seminorm(path, 0.4, "all-pairs") == pytest.approx(3.0)
    assert holder_seminorm(path, 0.4, "dyadic-pairs") == pytest.approx(3.0)


def test_holder_seminorm_of_square_root() -> None:
    grid = make_uniform_grid(1025, 0.0, 1.0)
    path = SampledPath(grid, np.sqrt(grid.points))
    # sqrt(t) - sqrt(s) <= sqrt(t - s) with equality at s = 0
    assert holder_seminorm(path, 0.5, "all-pairs") == pytest.approx(1.0, abs=1e-12)


def test_holder_seminorm_rejects_bad_exponent() -> None:
    grid = make_uniform_grid(5, 0.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        holder_seminorm(SampledPath(grid, grid.points), 0.0)


def test_pair_gaps_policies() -> None:
    assert pair_gaps(9, "dyadic-pairs") == [1, 2, 4, 8]
    assert pair_gaps(4, "all-pairs") == [1, 2, 3]
    with pytest.raises(InvalidArgumentError):
        pair_gaps(4, "every-other")


def test_dyadic_policy_within_chaining_constant() -> None:
    rng = np.random.default_rng(3)
    grid = make_uniform_grid(65, 0.0, 1.0)
    path = SampledPath(grid, np.cumsum(rng.standard_normal((65, 2)), axis=0) * 0.1)
    alpha = 0.4
    dyadic = holder_seminorm(path, alpha, "dyadic-pairs")
    full = holder_seminorm(path, alpha, "all-pairs")
    assert dyadic <= full + 1e-12
    assert full <= dyadic_constant(alpha) * dyadic * 2.0


def test_chen_field_matches_dense_storage() -> None:
    rng = np.random.default_rng(0)
    grid = make_uniform_grid(9, 0.0, 1.0)
    w = np.concatenate([np.zeros((1, 2)), np.cumsum(rng.standard_normal((8, 2)), axis=0)])
    dw = np.diff(w, axis=0)
    cell = np.einsum("na,nb->nab", w[:-1], dw) + 0.5 * np.einsum("na,nb->nab", dw, dw)
    anchor = np.concatenate([np.zeros((1, 2, 2)), np.cumsum(cell, axis=0)])
    field = ChenField(grid, w, anchor)
    dense = DenseField(grid, field.to_dense())
    for gap in (1, 3, 8):
        np.testing.assert_allclose(field.gap_diagonal(gap), dense.gap_diagonal(gap))
    np.testing.assert_allclose(field.restrict(2, 6).to_dense(), dense.restrict(2, 6).to_dense(), atol=1e-12)


def test_two_param_seminorm_scaling() -> None:
    grid = make_uniform_grid(9, 0.0, 1.0)
    field = DenseField.from_function(grid, lambda s, t: np.array([[t - s]]))
    # (t - s) / (t - s)^{0.8} = (t - s)^{0.2}, largest over the full interval
    assert two_param_seminorm(field, 0.8) == pytest.approx(1.0)
    # at exponent 2 the ratio is 1 / (t - s), largest at the mesh
    assert two_param_seminorm(field, 2.0) == pytest.approx(8.0)
    with pytest.raises(InvalidArgumentError):
        two_param_seminorm(field, 0.0)


def test_pair_outside_triangle() -> None:
    grid = make_uniform_grid(4, 0.0, 1.0)
    field = DenseField(grid, np.zeros((4, 4, 1, 1)))
    with pytest.raises(InvalidArgumentError):
        field.pair(2, 1)
    np.testing.assert_array_equal(field.pair(1, 1), np.zeros((1, 1)))
