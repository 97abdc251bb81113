"""
内置模型

统一的模型构造入口：按名字注册构造函数，由 ModelConfig + ScalingRegime 得到 ModelSpec。
  - example-3-10：价格强度依赖 (B, Y)，slow 区间的标准例子
  - example-fast：fast 区间例子，p^B 比 p^A 多出 Δt^{α-1/2} 量级
  - constant-test：常系数，用于精确性测试
"""

import logging
import math
from typing import Callable, Dict, Optional

import numpy as np
from scipy.special import ndtr

from app.core.exceptions import ConfigurationError
from app.core.grid import Grid, GridFunction, project_to_grid
from app.core.model import ModelSpec
from app.core.scaling import ScalingRegime
from app.schema.run_config import ModelConfig

logger = logging.getLogger(__name__)

_SQRT_2PI = math.sqrt(2.0 * math.pi)

Builder = Callable[[ModelConfig, ScalingRegime, Grid], ModelSpec]


# ====== 剖面函数 ======

def placement_density(width: float) -> Callable[[np.ndarray], np.ndarray]:
    """π 的密度 C(x-w)²(x+w)² 1_{[-w,w]}，C = 15/(16 w⁵)"""
    c = 15.0 / (16.0 * width ** 5)

    def rho(x):
        x = np.asarray(x, dtype=float)
        return np.where(np.abs(x) <= width, c * (x * x - width * width) ** 2, 0.0)

    return rho


def _placement_cdf(s: np.ndarray) -> np.ndarray:
    # s = x/w 处的分布函数
    return (3.0 * s ** 5 - 10.0 * s ** 3 + 15.0 * s + 8.0) / 16.0


_S_TABLE = np.linspace(-1.0, 1.0, 4097)
_F_TABLE = _placement_cdf(_S_TABLE)


def placement_quantile(width: float, uniforms: np.ndarray) -> np.ndarray:
    """逆分布函数：查表初值 + 3 步牛顿"""
    u = np.asarray(uniforms, dtype=float)
    s = np.interp(u, _F_TABLE, _S_TABLE)
    for _ in range(3):
        slope = 15.0 * (1.0 - s * s) ** 2 / 16.0
        s = np.clip(s - (_placement_cdf(s) - u) / np.maximum(slope, 1e-12), -1.0, 1.0)
    return width * s


def indicator_profile(lam: float) -> Callable[[np.ndarray], np.ndarray]:
    """h(x) = -(λx)³ e^{λx} 1_{x≤0}"""

    def h(x):
        z = lam * np.minimum(np.asarray(x, dtype=float), 0.0)
        return -(z ** 3) * np.exp(z)

    return h


def initial_profile(shape: str, height: float, width: float) -> Callable[[np.ndarray], np.ndarray]:
    def u0(x):
        x = np.asarray(x, dtype=float)
        inside = (x > -width) & (x <= 0.0)
        if shape == "block":
            return np.where(inside, height, 0.0)
        if shape == "quartic":
            r = (x + width / 2.0) / (width / 2.0)
            return np.where(inside, height * (1.0 - r * r) ** 2, 0.0)
        return np.zeros_like(x)

    return u0


def window_half_width(bound: float, b0: float, regime: ScalingRegime) -> float:
    """
    截断窗口半宽 L ≥ M + |B0| + 价格偏移估计 + 5 tick

    价格速度上界 Δx·Δp/Δt（强度和不超过 1），再加 6 倍扩散尺度。
    """
    speed = regime.dx * regime.dp / regime.dt
    spread = math.sqrt(2.0 * regime.horizon * regime.dx ** 2 * regime.dp / regime.dt)
    return bound + abs(b0) + regime.horizon * speed + 6.0 * spread + 5.0 * regime.dx


def _zero_density(b, y, x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _const(value: float):
    def fn(b, y):
        return np.zeros(np.shape(np.add(b, y))) + value

    return fn


class ModelFactory:
    """
    内置模型工厂，支持按名字访问
    """

    _builders: Dict[str, Builder] = {}

    @classmethod
    def register(cls, name: str) -> Callable[[Builder], Builder]:
        def decorator(builder: Builder) -> Builder:
            cls._builders[name] = builder
            return builder

        return decorator

    @classmethod
    def names(cls):
        return sorted(cls._builders)

    def bound_for(self, config: ModelConfig) -> float:
        """界 M：覆盖 |ω|、|π| 和 u0 的取值与支撑"""
        omega = abs(config.omega) if config.name == "constant-test" else 1.0
        return max(config.placement_width, omega, config.u0_height, config.u0_width)

    def grid_for(self, config: ModelConfig, regime: ScalingRegime, tick: Optional[float] = None,
                 half_width: Optional[float] = None) -> Grid:
        tick = tick or regime.dx
        if half_width is None:
            half_width = window_half_width(self.bound_for(config), config.B0, regime)
        return Grid.symmetric(tick, half_width)

    def build(self, config: ModelConfig, regime: ScalingRegime, grid: Optional[Grid] = None) -> ModelSpec:
        """
        构造并校验 ModelSpec

        Args:
            config: model 配置块
            regime: 尺度参数（example-fast 的离散强度依赖 Δt）
            grid: 网格，缺省按窗口规则生成

        Raises:
            ConfigurationError: 未知模型名
        """
        builder = self._builders.get(config.name)
        if builder is None:
            raise ConfigurationError(
                f"未知模型 {config.name}",
                {"fields": [{"loc": "model.name", "msg": f"可选 {self.names()}"}]},
            )
        grid = grid or self.grid_for(config, regime)
        spec = builder(config, regime, grid)
        spec.validate(regime)
        logger.info(f"模型 {config.name} 已构造: tick={grid.tick:.6g}, cells={grid.n_cells}, Y0={spec.initial_y():.6g}")
        return spec


def _shared_parts(config: ModelConfig, grid: Grid) -> dict:
    rho = placement_density(config.placement_width)
    width = config.placement_width

    def omega_sampler(b, y, uniforms):
        # P(ω=+1) = exp(-Y³) ∧ 1
        prob = np.exp(-np.maximum(np.asarray(y, dtype=float), 0.0) ** 3)
        return np.where(np.asarray(uniforms) < prob, 1.0, -1.0)

    def pi_sampler(b, y, uniforms):
        return placement_quantile(width, uniforms)

    def f_density(b, y, x):
        return (2.0 * math.exp(-max(y, 0.0) ** 3) - 1.0) * rho(x)

    def fy_density(b, y, x):
        if y < 0.0:
            return np.zeros_like(np.asarray(x, dtype=float))
        return -6.0 * y * y * math.exp(-y ** 3) * rho(x)

    def g_density(b, y, x):
        return rho(x)

    return dict(
        grid=grid,
        f_density=f_density,
        fb_density=_zero_density,
        fy_density=fy_density,
        g_density=g_density,
        h_profile=indicator_profile(config.lam),
        omega_sampler=omega_sampler,
        pi_sampler=pi_sampler,
        B0=config.B0,
        u0=project_to_grid(initial_profile(config.u0_shape, config.u0_height, config.u0_width), grid),
        bound=model_factory.bound_for(config),
    )


@ModelFactory.register("example-3-10")
def build_example_3_10(config: ModelConfig, regime: ScalingRegime, grid: Grid) -> ModelSpec:
    def p_a(b, y):
        return b / (1.0 + b) * ndtr(-np.asarray(y, dtype=float))

    def p_b(b, y):
        return 1.0 - p_a(b, y)

    def pb_fn(b, y):
        # ∂_b (1 - 2 b(1-Φ)/(1+b))
        return -2.0 * ndtr(-y) / (1.0 + b) ** 2

    def py_fn(b, y):
        return 2.0 * b / (1.0 + b) * math.exp(-0.5 * y * y) / _SQRT_2PI

    return ModelSpec(
        name=config.name,
        pA=p_a,
        pB=p_b,
        pb_fn=pb_fn,
        py_fn=py_fn,
        params=config.model_dump(),
        **_shared_parts(config, grid),
    )


@ModelFactory.register("example-fast")
def build_example_fast(config: ModelConfig, regime: ScalingRegime, grid: Grid) -> ModelSpec:
    eps = regime.dt ** (regime.alpha - 0.5)

    def q(b, y):
        return b / (1.0 + b) * ndtr(-np.asarray(y, dtype=float))

    if config.drift_split == "symmetric":
        def p_a(b, y):
            return (1.0 - 0.5 * eps) * q(b, y)

        def p_b(b, y):
            return (1.0 + 0.5 * eps) * q(b, y)
    else:
        p_a = q

        def p_b(b, y):
            return (1.0 + eps) * q(b, y)

    return ModelSpec(
        name=config.name,
        pA=p_a,
        pB=p_b,
        pA_limit=q,
        pB_limit=q,
        p_diff=q,
        pb_fn=_const(0.0),
        py_fn=_const(0.0),
        params=config.model_dump(),
        **_shared_parts(config, grid),
    )


@ModelFactory.register("constant-test")
def build_constant_test(config: ModelConfig, regime: ScalingRegime, grid: Grid) -> ModelSpec:
    width = config.placement_width
    omega = config.omega
    level = omega / (2.0 * width)

    def f_density(b, y, x):
        return np.where(np.abs(np.asarray(x, dtype=float)) <= width, level, 0.0)

    def g_density(b, y, x):
        return np.where(np.abs(np.asarray(x, dtype=float)) <= width, omega * level, 0.0)

    def omega_sampler(b, y, uniforms):
        return np.full(np.shape(uniforms), omega)

    def pi_sampler(b, y, uniforms):
        return -width + 2.0 * width * np.asarray(uniforms, dtype=float)

    return ModelSpec(
        name=config.name,
        grid=grid,
        pA=_const(config.p_a),
        pB=_const(config.p_b),
        p_diff=None if config.p_diff is None else _const(config.p_diff),
        f_density=f_density,
        fb_density=_zero_density,
        fy_density=_zero_density,
        g_density=g_density,
        pb_fn=_const(0.0),
        py_fn=_const(0.0),
        h_profile=indicator_profile(config.lam),
        omega_sampler=omega_sampler,
        pi_sampler=pi_sampler,
        B0=config.B0,
        u0=project_to_grid(initial_profile(config.u0_shape, config.u0_height, config.u0_width), grid),
        bound=model_factory.bound_for(config),
        params=config.model_dump(),
    )


# 全局工厂实例
model_factory = ModelFactory()


def build_model(config: ModelConfig, regime: ScalingRegime, grid: Optional[Grid] = None) -> ModelSpec:
    return model_factory.build(config, regime, grid)
