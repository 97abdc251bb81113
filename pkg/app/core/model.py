"""
模型系数包 ModelSpec

密度类系数（f, f_b, f_y, g, h）以逐点可调用对象保存，需要时投影到网格；
这样同一个系数既能在相对坐标下取值，也能在平移后的绝对坐标下取值。
价格强度 pA/pB 与采样器都是向量化的，批量模拟时直接传入数组。
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from app.core.exceptions import ConfigurationError, ModelValidityError
from app.core.grid import Grid, GridFunction, derivative, project_to_grid
from app.core.scaling import ScalingRegime

logger = logging.getLogger(__name__)

Intensity = Callable[[np.ndarray, np.ndarray], np.ndarray]
Density = Callable[[float, float, np.ndarray], np.ndarray]
Sampler = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def fd_step(arg: float) -> float:
    """中心差分步长 1e-5·(1+|arg|)"""
    return 1e-5 * (1.0 + abs(arg))


@dataclass(frozen=True)
class ModelSpec:
    """
    系数包

    pA / pB 是第 n 级离散模型的价格事件强度（模拟器使用）；
    pA_limit / pB_limit 是极限意义下的强度（σ、σ_B 和一阶 ODE 使用），缺省与离散相同。
    p_diff 是 fast 区间下 Z^B 的漂移 p(b,y)。
    """

    name: str
    grid: Grid
    pA: Intensity
    pB: Intensity
    f_density: Density
    g_density: Density
    h_profile: Callable[[np.ndarray], np.ndarray]
    omega_sampler: Sampler
    pi_sampler: Sampler
    B0: float
    u0: GridFunction
    bound: float
    pA_limit: Optional[Intensity] = None
    pB_limit: Optional[Intensity] = None
    p_diff: Optional[Intensity] = None
    fb_density: Optional[Density] = None
    fy_density: Optional[Density] = None
    pb_fn: Optional[Intensity] = None
    py_fn: Optional[Intensity] = None
    refine: int = 4
    params: dict = field(default_factory=dict)

    # ====== 价格强度 ======

    def intensities(self, b, y, limit: bool = False):
        if limit:
            pa = self.pA_limit or self.pA
            pb = self.pB_limit or self.pB
        else:
            pa, pb = self.pA, self.pB
        return pa(b, y), pb(b, y)

    def p_ba(self, b, y):
        """p^{B-A} = p^B - p^A（极限强度）"""
        pa, pb = self.intensities(b, y, limit=True)
        return pb - pa

    def sigma_b(self, b, y):
        """σ_B = (p^A + p^B)^{1/2}"""
        pa, pb = self.intensities(b, y, limit=True)
        return np.sqrt(np.maximum(pa + pb, 0.0))

    def pb(self, b: float, y: float) -> float:
        """∂_b p^{B-A}，无解析式时用中心差分"""
        if self.pb_fn is not None:
            return float(self.pb_fn(b, y))
        step = fd_step(b)
        return float((self.p_ba(b + step, y) - self.p_ba(b - step, y)) / (2.0 * step))

    def py(self, b: float, y: float) -> float:
        if self.py_fn is not None:
            return float(self.py_fn(b, y))
        step = fd_step(y)
        return float((self.p_ba(b, y + step) - self.p_ba(b, y - step)) / (2.0 * step))

    def drift(self, b: float, y: float) -> float:
        if self.p_diff is None:
            raise ConfigurationError(
                "fast 区间需要 pDiff",
                {"fields": [{"loc": "model.p_diff", "msg": f"模型 {self.name} 没有提供 pDiff"}]},
            )
        return float(self.p_diff(b, y))

    def placement_probability(self, b, y, regime: ScalingRegime):
        """C 事件概率 1 - Δp(pA+pB)"""
        pa, pb = self.intensities(b, y)
        return 1.0 - regime.dp * (pa + pb)

    # ====== 网格上的密度 ======

    def _project(self, density: Density, b: float, y: float, offset: float = 0.0) -> GridFunction:
        return project_to_grid(lambda x: density(b, y, x), self.grid, refine=self.refine, offset=offset)

    def f(self, b: float, y: float, offset: float = 0.0) -> GridFunction:
        return self._project(self.f_density, b, y, offset)

    def g(self, b: float, y: float, offset: float = 0.0) -> GridFunction:
        return self._project(self.g_density, b, y, offset)

    def fb(self, b: float, y: float, offset: float = 0.0) -> GridFunction:
        if self.fb_density is not None:
            return self._project(self.fb_density, b, y, offset)
        step = fd_step(b)
        up, down = self.f(b + step, y, offset), self.f(b - step, y, offset)
        return GridFunction(self.grid, (up.values - down.values) / (2.0 * step))

    def fy(self, b: float, y: float, offset: float = 0.0) -> GridFunction:
        if self.fy_density is not None:
            return self._project(self.fy_density, b, y, offset)
        step = fd_step(y)
        up, down = self.f(b, y + step, offset), self.f(b, y - step, offset)
        return GridFunction(self.grid, (up.values - down.values) / (2.0 * step))

    def f_discrete(self, b: float, y: float, regime: ScalingRegime) -> GridFunction:
        """第 n 级的一阶条件矩密度 f^(n) = P(C)·f"""
        return self.f(b, y) * float(self.placement_probability(b, y, regime))

    def g_discrete(self, b: float, y: float, regime: ScalingRegime) -> GridFunction:
        return self.g(b, y) * float(self.placement_probability(b, y, regime))

    @cached_property
    def h(self) -> GridFunction:
        return project_to_grid(self.h_profile, self.grid, refine=self.refine)

    @cached_property
    def h_prime(self) -> GridFunction:
        return derivative(self.h)

    def h_shifted(self, offset: float) -> GridFunction:
        """h(x + offset) 的格子平均"""
        return project_to_grid(self.h_profile, self.grid, refine=self.refine, offset=offset)

    # ====== 校验 ======

    def validate(self, regime: ScalingRegime) -> None:
        """
        启动时校验：u0 非负、有界、支撑在 [-M, M]；Δp·(pA+pB) ≤ 1

        Raises:
            ModelValidityError: 任一条件不满足
        """
        u0 = self.u0.values
        if np.any(u0 < 0.0):
            raise ModelValidityError("u0 必须非负", {"model": self.name})
        if np.any(u0 > self.bound):
            raise ModelValidityError("u0 超过界 M", {"model": self.name, "M": self.bound})
        support = self.grid.right_edges[u0 != 0.0]
        if support.size and (support.min() < -self.bound - self.grid.tick or support.max() > self.bound + self.grid.tick):
            raise ModelValidityError("u0 支撑超出 [-M, M]", {"model": self.name, "M": self.bound})

        y_span = self.bound * float(np.abs(self.h.values).sum() * self.grid.tick) + 1.0
        b_lo = max(self.B0 - self.grid.half_width, 0.0)
        bs, ys = np.meshgrid(
            np.linspace(b_lo, self.B0 + self.grid.half_width, 41),
            np.linspace(-y_span, y_span, 41),
        )
        pa, pb = self.intensities(bs, ys)
        total = regime.dp * (np.asarray(pa) + np.asarray(pb))
        if np.any(total > 1.0 + 1e-12) or np.any(np.asarray(pa) < 0) or np.any(np.asarray(pb) < 0):
            worst = np.unravel_index(int(np.argmax(total)), total.shape)
            raise ModelValidityError(
                "价格事件概率溢出：Δp·(pA+pB) > 1",
                {"model": self.name, "b": float(bs[worst]), "y": float(ys[worst]), "value": float(total[worst])},
            )
        logger.debug(f"模型 {self.name} 校验通过，cells={self.grid.n_cells}")

    def initial_y(self) -> float:
        return float(self.grid.tick * np.dot(self.h.values, self.u0.values))


@dataclass
class ConsistencyReport:
    """f / g 与采样器一致性的统计检验结果"""
    draws: int
    max_abs_z_f: float
    max_abs_z_g: float
    threshold: float = 4.0

    @property
    def passed(self) -> bool:
        return self.max_abs_z_f <= self.threshold and self.max_abs_z_g <= self.threshold


def _cell_z(samples_sum: np.ndarray, squares_sum: np.ndarray, draws: int, target: np.ndarray) -> float:
    mean = samples_sum / draws
    var = np.maximum(squares_sum / draws - mean ** 2, 0.0)
    se = np.sqrt(var / draws)
    diff = np.abs(mean - target)
    # 0/0 := 0
    z = np.divide(diff, se, out=np.where(diff > 1e-12, np.inf, 0.0), where=se > 0)
    return float(z.max()) if z.size else 0.0


def check_spec_consistency(
    spec: ModelSpec,
    regime: ScalingRegime,
    b: float,
    y: float,
    draws: int,
    rng: np.random.Generator,
) -> ConsistencyReport:
    """
    经验检验 Δx·f^(n) = E[1_C ω 1_{I(π)}] 与 Δx·g^(n) = E[1_C ω² 1_{I(π)}]

    每个格子给出 z 值，最大 |z| ≤ 4 视为通过。
    """
    grid = spec.grid
    uniforms = rng.random((draws, 3))
    pa, pb = spec.intensities(np.full(draws, b), np.full(draws, y))
    is_c = uniforms[:, 0] >= regime.dp * (pa + pb)
    bs, ys = np.full(draws, b), np.full(draws, y)
    omega = np.where(is_c, spec.omega_sampler(bs, ys, uniforms[:, 1]), 0.0)
    pos = np.clip(grid.cell_of(spec.pi_sampler(bs, ys, uniforms[:, 2])) - grid.lo_index, 0, grid.n_cells - 1)

    first = omega / grid.tick
    second = omega ** 2 / grid.tick
    n = grid.n_cells
    z_f = _cell_z(
        np.bincount(pos, weights=first, minlength=n),
        np.bincount(pos, weights=first ** 2, minlength=n),
        draws,
        spec.f_discrete(b, y, regime).values,
    )
    z_g = _cell_z(
        np.bincount(pos, weights=second, minlength=n),
        np.bincount(pos, weights=second ** 2, minlength=n),
        draws,
        spec.g_discrete(b, y, regime).values,
    )
    return ConsistencyReport(draws=draws, max_abs_z_f=z_f, max_abs_z_g=z_g)
