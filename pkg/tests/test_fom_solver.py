import numpy as np
import pytest

from app.core.builtin_models import build_model
from app.core.exceptions import GridMismatchError, NumericError
from app.core.grid import Grid, GridFunction, bump
from app.core.scaling import ScalingRegime
from app.schema.run_config import ModelConfig
from app.service.fom_solver import (
    discrete_derivative_check,
    forward_difference_pairing,
    solve_first_order,
    solve_first_order_upwind,
)

from tests.conftest import constant_spec

# 价格在一阶上运动：β = 1 - α
MOVING = ScalingRegime(dt=0.0625, alpha=0.5, beta=0.5)
# 价格不动：β > 1 - α
STILL = ScalingRegime(dt=0.0625, alpha=0.5, beta=0.9)


def test_constant_density_grows_linearly():
    spec = constant_spec(STILL, tick=0.25)
    path = solve_first_order(spec, STILL, solver_dt=0.1)
    f = spec.f(spec.B0, 0.0).values
    for t in (0.3, 1.0):
        np.testing.assert_allclose(path.state_at(t).u.values, spec.u0.values + t * f, atol=1e-12)
    np.testing.assert_allclose(path.B, spec.B0)


def test_constant_drift_transports_book():
    spec = constant_spec(MOVING, tick=0.25, omega=0.0, p_b=0.5)
    path = solve_first_order(spec, MOVING, solver_dt=0.05)
    assert path.B[-1] == pytest.approx(spec.B0 + 0.5, abs=1e-12)
    u_t = path.state_at(1.0).u
    grid = spec.grid
    # 块 (-2, 0] 移到 (-2.5, -0.5]
    expected = np.where((grid.left_edges >= -2.5 - 1e-12) & (grid.right_edges <= -0.5 + 1e-12), 1.0, 0.0)
    np.testing.assert_allclose(u_t.values, expected, atol=1e-12)
    assert path.Y[-1] == pytest.approx(grid.tick * float(np.dot(spec.h.values, expected)), abs=1e-12)


def test_upwind_matches_characteristics_on_whole_ticks():
    spec = constant_spec(MOVING, tick=0.25, omega=0.0, p_b=0.5)
    upwind = solve_first_order_upwind(spec, MOVING, solver_dt=0.05)
    assert upwind.frame == "relative"
    assert upwind.B[-1] == pytest.approx(spec.B0 + 0.5, abs=1e-12)
    # 迎风格式有 O(tick) 的数值扩散，总量守恒
    u_t = upwind.state_at(1.0).u
    assert u_t.integral() == pytest.approx(spec.u0.integral(), abs=1e-12)


def test_example_limit_path_is_smooth_and_recorded():
    regime = ScalingRegime(dt=1e-2, alpha=0.4, beta=0.6)
    spec = build_model(ModelConfig(name="example-3-10"), regime)
    path = solve_first_order(spec, regime, solver_dt=0.02)
    assert path.times[0] == 0.0 and path.horizon == pytest.approx(1.0)
    assert path.Y[0] == pytest.approx(spec.initial_y())
    # p^{B-A} = 1 - 2B(1-Φ(Y))/(1+B) > 0：价格上升
    assert np.all(np.diff(path.B) > 0)
    frame = path.to_frame()
    assert list(frame.columns) == ["t", "B", "Y"]
    assert len(frame) == path.times.size


def test_example_limit_path_converges_in_solver_step():
    regime = ScalingRegime(dt=1e-2, alpha=0.4, beta=0.6)
    spec = build_model(ModelConfig(name="example-3-10"), regime)
    coarse = solve_first_order(spec, regime, solver_dt=0.02)
    fine = solve_first_order(spec, regime, solver_dt=0.0002)
    assert coarse.B[-1] == pytest.approx(fine.B[-1], abs=1e-6)
    assert coarse.Y[-1] == pytest.approx(fine.Y[-1], abs=1e-6)
    t = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(coarse.B_at(t), fine.B_at(t), atol=1e-6)


def test_state_at_outside_horizon():
    spec = constant_spec(STILL, tick=0.25)
    path = solve_first_order(spec, STILL, solver_dt=0.25)
    with pytest.raises(NumericError):
        path.state_at(1.5)


def test_grid_argument_must_match():
    spec = constant_spec(STILL, tick=0.25)
    with pytest.raises(GridMismatchError):
        solve_first_order(spec, STILL, 0.1, grid=Grid.symmetric(0.5, 6.0))


def test_forward_difference_of_constant_vanishes():
    grid = Grid.symmetric(0.1, 4.0)
    u = GridFunction(grid, np.full(grid.n_cells, 2.0))
    assert forward_difference_pairing(u, bump(grid, -1.0, 1.0)) == pytest.approx(0.0, abs=1e-14)


def test_forward_difference_of_linear_book():
    grid = Grid.symmetric(0.1, 4.0)
    u = GridFunction(grid, grid.right_edges.copy())
    phi = bump(grid, -1.0, 1.0)
    exact = phi.integral()
    assert forward_difference_pairing(u, phi) == pytest.approx(exact, rel=1e-10)


def test_derivative_check_against_own_limit():
    spec = constant_spec(STILL, tick=0.25, omega=0.0)
    path = solve_first_order(spec, STILL, solver_dt=0.25)
    phi = bump(spec.grid, -2.0, 1.0)
    times = np.array([0.0, 0.5, 1.0])
    report = discrete_derivative_check([spec.u0] * 3, times, path, phi)
    assert report.gaps.shape == (3,)
    assert report.dx == 0.25
    # 块状盘口的前向差分与中心差分只差 O(Δx)·‖φ'‖
    assert report.sup_gap < 0.5
