import numpy as np
import pytest

from app.core.builtin_models import build_model, model_factory
from app.core.grid import Grid, GridFunction
from app.core.scaling import Regime, ScalingRegime
from app.schema.run_config import ModelConfig


@pytest.fixture
def unit_grid() -> Grid:
    """tick = 1，格子 -5..5"""
    return Grid.symmetric(1.0, 5.0)


@pytest.fixture
def fine_grid() -> Grid:
    return Grid.symmetric(1e-3, 2.0)


@pytest.fixture
def first_order_regime() -> ScalingRegime:
    return ScalingRegime(dt=1e-2, alpha=0.4, beta=0.6, horizon=1.0, regime=Regime.FIRST_ORDER_ONLY)


@pytest.fixture
def slow_regime() -> ScalingRegime:
    return ScalingRegime(dt=1e-2, alpha=0.4, beta=0.6, horizon=1.0, regime=Regime.SLOW)


@pytest.fixture
def fast_regime() -> ScalingRegime:
    return ScalingRegime(dt=1e-3, alpha=0.6, beta=0.8, horizon=1.0, regime=Regime.FAST)


def constant_config(**overrides) -> ModelConfig:
    """常系数模型：π 在 [-2, 2] 上均匀，u0 为 (-2, 0] 上的单位块"""
    fields = dict(
        name="constant-test",
        p_a=0.0,
        p_b=0.0,
        omega=1.0,
        placement_width=2.0,
        u0_shape="block",
        u0_height=1.0,
        u0_width=2.0,
        B0=1.0,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def constant_spec(regime: ScalingRegime, tick: float = None, half_width: float = 6.0, **overrides):
    config = constant_config(**overrides)
    grid = model_factory.grid_for(config, regime, tick=tick, half_width=half_width)
    return build_model(config, regime, grid)


def block(grid: Grid, lo: float, hi: float, height: float = 1.0) -> GridFunction:
    """(lo, hi] 上取 height 的阶梯函数（端点须在格点上）"""
    inside = (grid.left_edges >= lo - 1e-12) & (grid.right_edges <= hi + 1e-12)
    return GridFunction(grid, np.where(inside, height, 0.0))
