import math
from types import SimpleNamespace

import numpy as np
import pytest

from app.core.exceptions import ConfigurationError, InfeasibleTradeError, InsufficientSampleError
from app.core.grid import Grid, GridFunction, inner_product
from app.core.scaling import Regime, ScalingRegime
from app.schema.report import LiquidationInterval
from app.service.fom_solver import LimitPath
from app.service.liquidation import (
    LiquidationSchedule,
    ci_nonpermanent,
    correction_terms,
    coverage,
    impacted_first_order,
    permanent_plan,
    plan_trades,
    quantile_interval,
    read_schedule,
    realized_value,
    uniform_schedule,
    value_nonpermanent,
    value_permanent,
    write_schedule,
)

from tests.conftest import block, constant_spec

FAST = ScalingRegime(dt=0.0625, alpha=0.75, beta=0.5, regime=Regime.FAST)
SLOW = ScalingRegime(dt=0.0625, alpha=0.25, beta=0.75, regime=Regime.SLOW)


@pytest.fixture
def block_path():
    """B ≡ 1，u ≡ 1_{(-5,0]} 的静止一阶路径"""
    grid = Grid.symmetric(0.25, 6.0)
    u = block(grid, -5.0, 0.0).values
    return LimitPath(
        grid=grid,
        B0=1.0,
        times=np.array([0.0, 1.0]),
        B=np.ones(2),
        Y=np.zeros(2),
        values=np.stack([u, u]),
        frame="relative",
    )


def test_block_book_value(block_path):
    schedule = LiquidationSchedule([0.5], [1.5])
    assert value_nonpermanent(schedule, block_path) == pytest.approx(1.0 * 1.5 - 1.5 ** 2 / 2, abs=1e-12)


def test_simultaneous_trades_are_merged(block_path):
    merged = value_nonpermanent(LiquidationSchedule([0.5, 0.5], [0.5, 1.0]), block_path)
    assert merged == pytest.approx(0.375, abs=1e-12)
    plan = plan_trades(LiquidationSchedule([0.5, 0.5], [0.5, 1.0]), block_path)
    np.testing.assert_allclose(plan.depths, [1.5])


def test_book_recovers_between_trades(block_path):
    schedule = LiquidationSchedule([0.25, 0.75], [1.0, 1.0])
    assert value_nonpermanent(schedule, block_path) == pytest.approx(2 * (1.0 - 0.5), abs=1e-12)


def test_empty_liquidation_has_zero_value(block_path):
    assert value_nonpermanent(LiquidationSchedule([0.5], [0.0]), block_path) == 0.0


def test_infeasible_trade_reports_first_index_of_group(block_path):
    schedule = LiquidationSchedule([0.0, 0.5, 0.5], [1.0, 3.0, 7.0])
    with pytest.raises(InfeasibleTradeError) as info:
        value_nonpermanent(schedule, block_path)
    assert info.value.index == 1


@pytest.mark.parametrize(
    "times, shares",
    [([0.0, 0.5], [1.0, -0.1]), ([0.5, 0.2], [1.0, 1.0]), ([0.0], [1.0, 2.0])],
)
def test_schedule_validation(times, shares):
    with pytest.raises(ConfigurationError):
        LiquidationSchedule(times, shares)


def test_uniform_schedule_on_event_grid():
    schedule = uniform_schedule(3.0, 4, horizon=1.0, dt=0.1)
    np.testing.assert_allclose(schedule.times, [0.0, 0.2, 0.5, 0.7])
    assert schedule.total == pytest.approx(3.0)
    trades = schedule.to_trades(ScalingRegime(dt=0.1, alpha=0.5, beta=0.9))
    assert [t.step for t in trades] == [0, 2, 5, 7]
    with pytest.raises(ConfigurationError):
        uniform_schedule(1.0, 0, horizon=1.0, dt=0.1)


def test_schedule_file(tmp_path):
    path = tmp_path / "schedule.csv"
    write_schedule(LiquidationSchedule([0.0, 0.5], [1.0, 2.0]), path)
    loaded = read_schedule(path)
    np.testing.assert_array_equal(loaded.shares, [1.0, 2.0])

    bad = tmp_path / "bad.csv"
    bad.write_text("time,shares\n0,1\n")
    with pytest.raises(ConfigurationError):
        read_schedule(bad)


def test_trade_weight_function_integrates_price(block_path):
    plan = plan_trades(LiquidationSchedule([0.5], [1.5]), block_path)
    weight = plan.weight_functions(block_path.grid)["trade_0"]
    ones = GridFunction(block_path.grid, np.ones(block_path.grid.n_cells))
    assert inner_product(ones, weight) == pytest.approx(-1.125)


def test_correction_terms(block_path):
    plan = plan_trades(LiquidationSchedule([0.5], [1.5]), block_path)
    zb = np.array([[1.0], [2.0]])
    pairings = {"trade_0": np.array([[0.5], [-1.0]])}
    np.testing.assert_allclose(correction_terms(plan, zb, pairings), [2.0, 2.0])


def test_quantile_interval_type_7():
    lo, hi = quantile_interval(1.0, np.array([-1.0, 0.0, 1.0, 2.0, 3.0]), scale=0.5, level=0.5)
    assert (lo, hi) == pytest.approx((1.0, 2.0))
    with pytest.raises(ConfigurationError):
        quantile_interval(1.0, np.zeros(3), 1.0, 1.0)


def test_zero_noise_interval_collapses(block_path):
    plan = plan_trades(LiquidationSchedule([0.5], [1.5]), block_path)
    zeros = np.zeros((600, 1))
    interval = ci_nonpermanent(plan, zeros, {"trade_0": zeros}, FAST)
    assert interval.lo == interval.hi == pytest.approx(plan.value)
    assert interval.impact == "non-permanent"
    assert interval.M == 600


def test_interval_needs_enough_limit_paths(block_path):
    plan = plan_trades(LiquidationSchedule([0.5], [1.5]), block_path)
    zeros = np.zeros((100, 1))
    with pytest.raises(InsufficientSampleError):
        ci_nonpermanent(plan, zeros, {"trade_0": zeros}, FAST)


def test_permanent_trade_moves_price():
    spec = constant_spec(SLOW, tick=0.25, omega=0.0)
    impacted = impacted_first_order(LiquidationSchedule([0.5], [1.5]), spec, SLOW, solver_dt=0.1)
    assert impacted.B_at(0.25) == pytest.approx(spec.B0)
    assert impacted.B_at(1.0) == pytest.approx(spec.B0 - 1.5)
    assert impacted.pre_trade[0].B == pytest.approx(spec.B0)
    np.testing.assert_allclose(impacted.removed, [1.5])
    assert value_permanent(impacted) == pytest.approx(spec.B0 * 1.5 - 1.125, abs=1e-12)
    (jump,) = impacted.jumps()
    assert (jump.t, jump.depth, jump.cut_density) == pytest.approx((0.5, 1.5, 1.0))
    assert impacted.horizon == pytest.approx(1.0)


def test_permanent_value_on_static_block_ignores_split():
    # 静止的块状盘口被依次吃掉，总价值只取决于 X
    spec = constant_spec(SLOW, tick=0.25, omega=0.0)
    impacted = impacted_first_order(LiquidationSchedule([0.25, 0.5], [0.5, 1.0]), spec, SLOW, solver_dt=0.1)
    np.testing.assert_allclose(impacted.depths, [0.5, 1.0])
    np.testing.assert_allclose(impacted.values, [0.375, 0.0], atol=1e-12)
    assert impacted.B_at(1.0) == pytest.approx(spec.B0 - 1.5)
    plan = permanent_plan(impacted)
    assert plan.value == pytest.approx(0.375)


def test_realized_value_skips_aborted_paths():
    batch = SimpleNamespace(aborted=np.array([False, True]), trade_values=np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(realized_value(batch), [3.0])


def test_coverage():
    interval = LiquidationInterval(V=1.5, lo=0.5, hi=2.5, level=0.9, M=600, regime="fast", impact="non-permanent")
    assert coverage(np.array([0.0, 1.0, 2.0, 3.0]), interval) == 0.5
    assert math.isnan(coverage(np.array([]), interval))
