import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core.depth import (
    cell_first_moment,
    cell_overlap,
    depth_for_mass,
    first_moment_between,
    mass_between,
    remove_between,
)
from app.core.exceptions import InfeasibleTradeError
from app.core.grid import Grid

from tests.conftest import block


def _staircase(grid: Grid) -> np.ndarray:
    # 从 0 向左每个单位格子依次 1, 2, 3
    values = np.zeros(grid.n_cells)
    for j, height in zip((0, -1, -2), (1.0, 2.0, 3.0)):
        values[grid.position(j)] = height
    return values


def test_block_book_depth(unit_grid):
    u = block(unit_grid, -5.0, 0.0).values
    assert depth_for_mass(u, unit_grid, 2.0) == pytest.approx(2.0, abs=1e-12)


def test_zero_volume_has_zero_depth(unit_grid):
    u = block(unit_grid, -5.0, 0.0).values
    assert depth_for_mass(u, unit_grid, 0.0) == 0.0


def test_staircase_depth(unit_grid):
    u = _staircase(unit_grid)
    assert depth_for_mass(u, unit_grid, 4.0) == pytest.approx(2.0 + 1.0 / 3.0, abs=1e-12)


def test_infeasible_volume(unit_grid):
    u = _staircase(unit_grid)
    with pytest.raises(InfeasibleTradeError) as info:
        depth_for_mass(u, unit_grid, 7.5)
    assert info.value.detail["available"] == pytest.approx(6.0)
    assert info.value.exit_code == 3


def test_depth_from_shifted_top(unit_grid):
    # top = -1 时从格子 -1 开始向左
    u = _staircase(unit_grid)
    assert depth_for_mass(u, unit_grid, 3.5, top=-1.0) == pytest.approx(1.5, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    heights=st.lists(st.floats(min_value=0.05, max_value=5.0), min_size=6, max_size=6),
    fraction=st.floats(min_value=0.0, max_value=1.0),
)
def test_depth_inverts_cumulative_mass(heights, fraction):
    grid = Grid.symmetric(0.5, 4.0)
    values = np.zeros(grid.n_cells)
    for k, height in enumerate(heights):
        values[grid.position(-k)] = height
    theta = fraction * 0.5 * sum(heights)
    c = depth_for_mass(values, grid, theta)
    assert 0.0 <= c <= 3.0 + 1e-12
    assert mass_between(values, grid, -c, 0.0) == pytest.approx(theta, abs=1e-11)


def test_overlap_and_moment_of_partial_cells():
    grid = Grid.symmetric(1.0, 3.0)
    overlap = cell_overlap(grid, -1.5, 0.0)
    assert overlap[grid.position(0)] == 1.0
    assert overlap[grid.position(-1)] == 0.5
    assert overlap.sum() == 1.5
    moment = cell_first_moment(grid, -1.5, 0.0)
    # ∫_{-1.5}^0 x dx = -1.125
    assert moment.sum() == pytest.approx(-1.125)
    np.testing.assert_array_equal(cell_overlap(grid, 1.0, 1.0), 0.0)


def test_first_moment_of_block_book(unit_grid):
    u = block(unit_grid, -5.0, 0.0).values
    assert first_moment_between(u, unit_grid, -2.0, 0.0) == pytest.approx(-2.0)


def test_remove_between_takes_exact_mass(unit_grid):
    u = _staircase(unit_grid)
    rest = remove_between(u, unit_grid, -7.0 / 3.0, 0.0)
    assert unit_grid.tick * rest.sum() == pytest.approx(6.0 - 4.0)
    assert rest[unit_grid.position(0)] == 0.0
    assert rest[unit_grid.position(-2)] == pytest.approx(2.0)
