import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from app.core.builtin_models import indicator_profile, initial_profile, placement_density
from app.core.exceptions import GridMismatchError, NumericError
from app.core.grid import (
    Grid,
    GridFunction,
    InterpolationOrder,
    ShiftDirection,
    default_test_functions,
    derivative,
    inner_product,
    project_to_grid,
    shift,
    shift_array,
    shift_by,
)

from tests.conftest import block

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)


def test_symmetric_grid_layout():
    grid = Grid.symmetric(0.5, 2.0)
    assert (grid.lo_index, grid.hi_index) == (-4, 4)
    assert grid.n_cells == 9
    assert grid.half_width == 2.0
    # 格子 0 为 (-Δx, 0]
    assert grid.right_edges[grid.position(0)] == 0.0
    assert grid.left_edges[grid.position(0)] == -0.5
    assert grid.cell_of(0.0) == 0
    assert grid.cell_of(-0.25) == 0
    assert grid.cell_of(0.25) == 1


def test_grid_rejects_bad_layout():
    with pytest.raises(GridMismatchError):
        Grid(tick=0.0, lo_index=-1, hi_index=1)
    with pytest.raises(GridMismatchError):
        Grid(tick=1.0, lo_index=0, hi_index=3)


def test_grid_function_validates_values():
    grid = Grid.symmetric(1.0, 2.0)
    with pytest.raises(GridMismatchError):
        GridFunction(grid, np.zeros(3))
    values = np.zeros(grid.n_cells)
    values[1] = np.nan
    with pytest.raises(NumericError) as info:
        GridFunction(grid, values)
    assert info.value.detail["cell"] == grid.lo_index + 1


def test_inner_product_of_blocks():
    grid = Grid(tick=0.5, lo_index=-2, hi_index=2)
    a = GridFunction(grid, [1.0, 1.0, 1.0, 1.0, 0.0])
    assert inner_product(a, a) == pytest.approx(2.0, abs=1e-15)


def test_inner_product_h_with_block_converges():
    grid = Grid.symmetric(1e-3, 2.0)
    h = project_to_grid(indicator_profile(1.0), grid)
    b = project_to_grid(initial_profile("block", 1.0, 1.0), grid)
    assert inner_product(h, b) == pytest.approx(6.0 - 16.0 / math.e, abs=1e-4)


def test_inner_product_rejects_other_grid():
    a = Grid.symmetric(1.0, 2.0).zeros()
    b = Grid.symmetric(0.5, 2.0).zeros()
    with pytest.raises(GridMismatchError):
        inner_product(a, b)


@settings(max_examples=50, deadline=None)
@given(
    a=arrays(np.float64, 11, elements=finite),
    b=arrays(np.float64, 11, elements=finite),
    c=arrays(np.float64, 11, elements=finite),
    s=finite,
)
def test_inner_product_is_bilinear(a, b, c, s):
    grid = Grid.symmetric(1.0, 5.0)
    fa, fb, fc = GridFunction(grid, a), GridFunction(grid, b), GridFunction(grid, c)
    lhs = inner_product(fa * s + fb, fc)
    rhs = s * inner_product(fa, fc) + inner_product(fb, fc)
    scale = 1.0 + abs(s) * np.abs(a).sum() * np.abs(c).max() + np.abs(b).sum() * np.abs(c).max()
    assert abs(lhs - rhs) <= 1e-12 * scale
    assert inner_product(fa, grid.zeros()) == 0.0


def test_shift_minus_moves_unit_mass_right(unit_grid):
    u = unit_grid.zeros()
    u.values[unit_grid.position(0)] = 1.0
    moved = shift(u, ShiftDirection.MINUS)
    assert moved.values[unit_grid.position(1)] == 1.0
    assert moved.values.sum() == 1.0


@settings(max_examples=50, deadline=None)
@given(interior=arrays(np.float64, 9, elements=finite))
def test_shift_plus_then_minus_is_identity_inside_window(interior):
    grid = Grid.symmetric(1.0, 5.0)
    values = np.concatenate([[0.0], interior, [0.0]])
    u = GridFunction(grid, values)
    back = shift(shift(u, ShiftDirection.PLUS), ShiftDirection.MINUS)
    np.testing.assert_array_equal(back.values, values)


def test_shift_keeps_constant_in_interior(unit_grid):
    u = GridFunction(unit_grid, np.full(unit_grid.n_cells, 3.0))
    for direction in ShiftDirection:
        moved = shift(u, direction)
        np.testing.assert_array_equal(moved.values[1:-1], 3.0)


def test_shift_array_integer_cells_is_exact():
    values = np.arange(6, dtype=float)
    np.testing.assert_array_equal(shift_array(values, 2), [0, 0, 0, 1, 2, 3])
    np.testing.assert_array_equal(shift_array(values, -1), [1, 2, 3, 4, 5, 0])
    np.testing.assert_allclose(shift_array(values, 0.5), [0.0, 0.5, 1.5, 2.5, 3.5, 4.5])


def test_shift_by_cubic_matches_linear_on_integer_distance(unit_grid):
    u = GridFunction(unit_grid, np.linspace(0.0, 1.0, unit_grid.n_cells))
    linear = shift_by(u, 2.0, InterpolationOrder.LINEAR)
    cubic = shift_by(u, 2.0, InterpolationOrder.CUBIC)
    np.testing.assert_array_equal(linear.values, cubic.values)


def test_projection_of_constant_and_linear():
    grid = Grid.symmetric(0.25, 1.0)
    ones = project_to_grid(lambda x: np.ones_like(x), grid)
    np.testing.assert_array_equal(ones.values, 1.0)
    linear = project_to_grid(lambda x: x, grid, refine=3)
    assert linear.values[grid.position(1)] == pytest.approx(0.125, abs=1e-15)


def test_projection_rejects_non_finite():
    grid = Grid.symmetric(1.0, 2.0)
    with pytest.raises(NumericError):
        project_to_grid(lambda x: np.where(x > 0.0, np.inf, 0.0), grid)


def test_placement_density_integrates_to_one():
    rho = placement_density(10.0)
    total, _ = integrate.quad(rho, -10.0, 10.0)
    assert total == pytest.approx(1.0, abs=1e-10)
    assert rho(np.array([0.0]))[0] == pytest.approx(3.0 / 320000.0 * 1e4, rel=1e-12)
    grid = Grid.symmetric(0.01, 10.0)
    assert project_to_grid(rho, grid).integral() == pytest.approx(1.0, abs=1e-10)


def test_derivative_of_constant_vanishes_inside(unit_grid):
    u = GridFunction(unit_grid, np.full(unit_grid.n_cells, 2.0))
    np.testing.assert_array_equal(derivative(u).values, 0.0)


def test_block_mass(unit_grid):
    assert block(unit_grid, -3.0, 0.0).integral() == 3.0


def test_default_test_functions_names(unit_grid):
    h = project_to_grid(indicator_profile(1.0), unit_grid)
    family = default_test_functions(unit_grid, h)
    assert sorted(family) == sorted(["bump_-4", "bump_-3", "bump_-2", "bump_-1", "bump_0", "h"])
    assert family["h"] is h
