"""
一阶（大数定律）极限求解器

在绝对坐标 v(t,z) = u(t, z - (B_t - B0)) 下，方程化为逐格 ODE：
    dB/dt = 1_{β=1-α}·p^{B-A}(B, Y)
    dv/dt(z) = f(B, Y; z - (B_t - B0))
    Y = ⟨h(· - (B_t - B0)), v⟩
用显式 RK4 积分，Y 在每个 stage 由当前 stage 状态计算。
相对坐标下的 u 只在需要时由 v 平移重建（线性或三次插值）。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.core.exceptions import NumericError
from app.core.grid import Grid, GridFunction, InterpolationOrder, derivative, inner_product, shift_by
from app.core.model import ModelSpec
from app.core.scaling import ScalingRegime

logger = logging.getLogger(__name__)


@dataclass
class LimitSnapshot:
    """极限路径在时刻 t 的取值"""
    t: float
    B: float
    Y: float
    u: GridFunction
    du: GridFunction  # ∂_x u


@dataclass
class LimitPath:
    """
    一阶极限路径

    frame = "absolute" 时 values 存的是 v（绝对坐标），否则直接是相对坐标下的 u。
    """

    grid: Grid
    B0: float
    times: np.ndarray
    B: np.ndarray
    Y: np.ndarray
    values: np.ndarray
    frame: str = "absolute"
    interpolation: InterpolationOrder = InterpolationOrder.LINEAR
    _cache: Dict[int, GridFunction] = field(default_factory=dict, repr=False)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def v_abs(self, i: int) -> GridFunction:
        return GridFunction(self.grid, self.values[i])

    def u_at_index(self, i: int) -> GridFunction:
        """第 i 个存储时刻的相对坐标密度"""
        if i not in self._cache:
            raw = GridFunction(self.grid, self.values[i])
            if self.frame == "absolute":
                offset = float(self.B[i] - self.B0)
                raw = raw if offset == 0.0 else shift_by(raw, -offset, self.interpolation)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[i] = raw
        return self._cache[i]

    def _bracket(self, t: float) -> Tuple[int, float]:
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise NumericError("时间超出极限路径范围", {"t": t, "horizon": self.horizon})
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        i = min(max(i, 0), self.times.size - 1)
        if i == self.times.size - 1 or abs(t - self.times[i]) <= 1e-12:
            return i, 0.0
        w = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return i, float(w)

    def state_at(self, t: float) -> LimitSnapshot:
        """时间方向线性插值"""
        i, w = self._bracket(t)
        u = self.u_at_index(i)
        if w == 0.0:
            return LimitSnapshot(t, float(self.B[i]), float(self.Y[i]), u, derivative(u))
        nxt = self.u_at_index(i + 1)
        mixed = GridFunction(self.grid, (1.0 - w) * u.values + w * nxt.values)
        b = (1.0 - w) * self.B[i] + w * self.B[i + 1]
        y = (1.0 - w) * self.Y[i] + w * self.Y[i + 1]
        return LimitSnapshot(t, float(b), float(y), mixed, derivative(mixed))

    def B_at(self, t):
        return np.interp(t, self.times, self.B)

    def Y_at(self, t):
        return np.interp(t, self.times, self.Y)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "B": self.B, "Y": self.Y})


class FirstOrderSolver:
    """
    绝对坐标 RK4 求解器

    Args:
        spec: 模型（网格取 spec.grid）
        regime: 尺度参数，决定价格是否运动
        solver_dt: 时间步长
        interpolation: 相对坐标重建的插值阶
    """

    def __init__(
        self,
        spec: ModelSpec,
        regime: ScalingRegime,
        solver_dt: float,
        interpolation: InterpolationOrder = InterpolationOrder.LINEAR,
    ):
        self.spec = spec
        self.regime = regime
        self.solver_dt = solver_dt
        self.interpolation = InterpolationOrder(interpolation)
        self.grid = spec.grid
        self.indicator = 1.0 if regime.price_moves else 0.0

    def _h_at(self, offset: float) -> np.ndarray:
        if offset == 0.0:
            return self.spec.h.values
        return self.spec.h_shifted(-offset).values

    def observe(self, b: float, v: np.ndarray) -> float:
        """Y = ⟨h(· - D), v⟩"""
        return float(self.grid.tick * np.dot(self._h_at(b - self.spec.B0), v))

    def rhs(self, t: float, b: float, v: np.ndarray) -> Tuple[float, np.ndarray]:
        offset = b - self.spec.B0
        y = self.observe(b, v)
        db = self.indicator * float(self.spec.p_ba(b, y)) if self.indicator else 0.0
        dv = self.spec.f(b, y, offset=-offset).values
        if not (math.isfinite(db) and np.all(np.isfinite(dv))):
            bad = int(np.flatnonzero(~np.isfinite(dv))[0]) + self.grid.lo_index if not np.all(np.isfinite(dv)) else None
            raise NumericError("系数出现非有限值", {"t": t, "B": b, "Y": y, "cell": bad})
        return db, dv

    def integrate(self, t0: float, t1: float, b_start: float, v_start: np.ndarray) -> LimitPath:
        """从 (t0, B, v) 积分到 t1，存储每一步"""
        n_steps = max(1, int(math.ceil((t1 - t0) / self.solver_dt - 1e-9)))
        h = (t1 - t0) / n_steps
        times = t0 + h * np.arange(n_steps + 1)
        times[-1] = t1
        bs = np.empty(n_steps + 1)
        ys = np.empty(n_steps + 1)
        vs = np.empty((n_steps + 1, self.grid.n_cells))
        b, v = float(b_start), np.array(v_start, dtype=float)
        bs[0], ys[0], vs[0] = b, self.observe(b, v), v

        for i in range(n_steps):
            t = times[i]
            k1b, k1v = self.rhs(t, b, v)
            k2b, k2v = self.rhs(t + h / 2, b + h / 2 * k1b, v + h / 2 * k1v)
            k3b, k3v = self.rhs(t + h / 2, b + h / 2 * k2b, v + h / 2 * k2v)
            k4b, k4v = self.rhs(t + h, b + h * k3b, v + h * k3v)
            b = b + h / 6 * (k1b + 2 * k2b + 2 * k3b + k4b)
            v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
            bs[i + 1], ys[i + 1], vs[i + 1] = b, self.observe(b, v), v

        return LimitPath(
            grid=self.grid,
            B0=self.spec.B0,
            times=times,
            B=bs,
            Y=ys,
            values=vs,
            frame="absolute",
            interpolation=self.interpolation,
        )

    def solve(self) -> LimitPath:
        path = self.integrate(0.0, self.regime.horizon, self.spec.B0, self.spec.u0.values)
        logger.info(f"一阶极限求解完成: steps={path.times.size - 1}, B_T={path.B[-1]:.6g}, Y_T={path.Y[-1]:.6g}")
        return path


def solve_first_order(
    spec: ModelSpec,
    regime: ScalingRegime,
    solver_dt: float,
    grid: Optional[Grid] = None,
    interpolation: InterpolationOrder = InterpolationOrder.LINEAR,
) -> LimitPath:
    """
    求解一阶 ODE-PDE 系统

    Args:
        grid: 若给出，必须与 spec.grid 相同
    """
    if grid is not None:
        spec.grid.check_same(grid)
    return FirstOrderSolver(spec, regime, solver_dt, interpolation).solve()


def solve_first_order_upwind(spec: ModelSpec, regime: ScalingRegime, solver_dt: float) -> LimitPath:
    """
    相对坐标下的迎风格式（显式 Euler + CFL 子步），用作坐标系一致性的交叉检验

    u_t = p^{B-A} ∂_x u + f，特征速度为 -p^{B-A}，p > 0 时用前向差分。
    """
    grid = spec.grid
    tick = grid.tick
    indicator = 1.0 if regime.price_moves else 0.0
    n_steps = max(1, int(math.ceil(regime.horizon / solver_dt - 1e-9)))
    h = regime.horizon / n_steps
    times = h * np.arange(n_steps + 1)
    times[-1] = regime.horizon
    b, u = spec.B0, spec.u0.values.copy()
    hv = spec.h.values
    bs, ys, us = [b], [tick * float(np.dot(hv, u))], [u.copy()]

    for _ in range(n_steps):
        remaining = h
        while remaining > 1e-15:
            y = tick * float(np.dot(hv, u))
            speed = indicator * float(spec.p_ba(b, y))
            dt = remaining if speed == 0.0 else min(remaining, 0.9 * tick / abs(speed))
            grad = np.zeros_like(u)
            if speed > 0:
                grad[:-1] = (u[1:] - u[:-1]) / tick
            elif speed < 0:
                grad[1:] = (u[1:] - u[:-1]) / tick
            u = u + dt * (speed * grad + spec.f(b, y).values)
            b = b + dt * speed
            remaining -= dt
        bs.append(b)
        ys.append(tick * float(np.dot(hv, u)))
        us.append(u.copy())

    return LimitPath(
        grid=grid,
        B0=spec.B0,
        times=times,
        B=np.asarray(bs),
        Y=np.asarray(ys),
        values=np.stack(us),
        frame="relative",
    )


# ====== 离散导数检验 ======

@dataclass
class DerivativeReport:
    """离散导数与极限导数配对之差"""
    dx: float
    times: np.ndarray
    gaps: np.ndarray

    @property
    def sup_gap(self) -> float:
        return float(np.max(np.abs(self.gaps))) if self.gaps.size else 0.0


def forward_difference_pairing(u: GridFunction, phi: GridFunction) -> float:
    """⟨(T_+ - I)u / Δx, φ⟩"""
    u.grid.check_same(phi.grid)
    diff = np.zeros_like(u.values)
    diff[:-1] = (u.values[1:] - u.values[:-1]) / u.grid.tick
    diff[-1] = -u.values[-1] / u.grid.tick
    return float(u.grid.tick * np.dot(diff, phi.values))


def discrete_derivative_check(
    snapshots: List[GridFunction],
    times: np.ndarray,
    limit_path: LimitPath,
    phi: GridFunction,
) -> DerivativeReport:
    """
    sup_t |⟨(T_+ - I)u^(n)(t)/Δx, φ⟩ - ⟨∂_x u(t), φ⟩|

    Args:
        snapshots: 模拟器在 times 时刻的 u 快照
        limit_path: 同一网格上的一阶极限
        phi: 光滑测试函数的网格投影
    """
    gaps = []
    for t, u_n in zip(times, snapshots):
        limit_du = limit_path.state_at(float(t)).du
        gaps.append(forward_difference_pairing(u_n, phi) - inner_product(limit_du, phi))
    return DerivativeReport(dx=phi.grid.tick, times=np.asarray(times, dtype=float), gaps=np.asarray(gaps))
