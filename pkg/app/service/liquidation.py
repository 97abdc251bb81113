"""
组合清算的价值与置信区间

非永久冲击（fast 区间）：盘口在两笔成交之间完全恢复，价格保持 B0
    V = Σ_i [B(t_i)θ_i + ∫_{-c_i}^0 x·u(t_i,x)dx]
永久冲击（slow 区间）：成交吃掉 (-c_i, 0] 上的量，价格下移 c_i，之后按一阶方程演化。
置信区间由二阶极限蒙特卡洛的修正项 √Δ·Σ_i[Z^B(t_i)θ_i + ∫_{-c_i}^0 x·Z^u(t_i,x)dx] 的分位数给出。
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd

from app.core.depth import cell_first_moment, depth_for_mass, first_moment_between, mass_between, remove_between
from app.core.exceptions import ConfigurationError, InfeasibleTradeError, InsufficientSampleError, NumericError
from app.core.grid import Grid, GridFunction, InterpolationOrder
from app.core.model import ModelSpec
from app.core.scaling import ScalingRegime
from app.schema.report import LiquidationInterval
from app.service.fom_solver import FirstOrderSolver, LimitPath, LimitSnapshot
from app.service.simulator import DiscretePathBatch, TradeRecord
from app.service.som_slow import TradeJump

logger = logging.getLogger(__name__)

MIN_LIMIT_PATHS = 500
# 同一时刻判定的容差
TIME_TOL = 1e-12


@dataclass
class LiquidationSchedule:
    """
    清算计划：时刻 t_i 卖出 θ_i 股

    Raises:
        ConfigurationError: θ_i < 0 或时刻不单调
    """

    times: np.ndarray
    shares: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.shares = np.asarray(self.shares, dtype=float)
        if self.times.shape != self.shares.shape:
            raise ConfigurationError("清算计划的时刻与股数长度不一致",
                                     {"fields": [{"loc": "experiment.schedule_file", "msg": "长度不一致"}]})
        if np.any(self.shares < 0) or not np.all(np.isfinite(self.shares)):
            raise ConfigurationError("清算股数必须非负",
                                     {"fields": [{"loc": "experiment.schedule_file", "msg": "θ_i < 0"}]})
        if np.any(np.diff(self.times) < 0) or np.any(self.times < 0):
            raise ConfigurationError("清算时刻必须非负且单调不减",
                                     {"fields": [{"loc": "experiment.schedule_file", "msg": "时刻无序"}]})

    @property
    def total(self) -> float:
        """X = Σθ_i"""
        return math.fsum(self.shares)

    def aggregated(self) -> "LiquidationSchedule":
        """同一时刻的成交合并为一笔（盘口在同一时刻内不反应）"""
        if self.times.size == 0:
            return self
        groups = np.concatenate([[0], np.flatnonzero(np.diff(self.times) > TIME_TOL) + 1])
        shares = np.add.reduceat(self.shares, groups)
        return LiquidationSchedule(self.times[groups], shares)

    def to_trades(self, regime: ScalingRegime) -> List[TradeRecord]:
        """换算成离散模型的成交（事件步），同一步合并"""
        steps = np.clip(np.round(self.times / regime.dt).astype(np.int64), 0, regime.n_events)
        merged: Dict[int, float] = {}
        for step, theta in zip(steps, self.shares):
            if theta > 0:
                merged[int(step)] = merged.get(int(step), 0.0) + float(theta)
        return [TradeRecord(step=s, shares=v) for s, v in sorted(merged.items())]


def uniform_schedule(total: float, slices: int, horizon: float, dt: float) -> LiquidationSchedule:
    """
    在事件网格的等距子网格上均分 X

    第 i 笔在 t = floor(i·T_n/slices)·Δt，i = 0..slices-1；最后一笔补齐余数。
    """
    if slices < 1:
        raise ConfigurationError("slices 至少为 1", {"fields": [{"loc": "experiment.slices", "msg": "< 1"}]})
    n_events = int(math.floor(horizon / dt + 1e-9))
    steps = np.floor(np.arange(slices) * n_events / slices).astype(np.int64)
    shares = np.full(slices, total / slices)
    shares[-1] = total - math.fsum(shares[:-1])
    return LiquidationSchedule(steps * dt, shares)


def read_schedule(path: Union[str, Path]) -> LiquidationSchedule:
    """读取 CSV (t, shares)"""
    frame = pd.read_csv(path)
    missing = {"t", "shares"} - set(frame.columns)
    if missing:
        raise ConfigurationError(f"清算计划缺少列 {sorted(missing)}",
                                 {"fields": [{"loc": "experiment.schedule_file", "msg": f"缺少 {sorted(missing)}"}]})
    frame = frame.sort_values("t", kind="stable")
    return LiquidationSchedule(frame["t"].to_numpy(), frame["shares"].to_numpy())


def schedule_frame(schedule: LiquidationSchedule) -> pd.DataFrame:
    return pd.DataFrame({"t": schedule.times, "shares": schedule.shares})


def write_schedule(schedule: LiquidationSchedule, path: Union[str, Path]) -> None:
    schedule_frame(schedule).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def depth_for_shares(u: GridFunction, theta: float) -> float:
    """
    最小 c ≥ 0 使 ∫_{-c}^0 u = θ

    Raises:
        InfeasibleTradeError: θ 超过可用量
    """
    return depth_for_mass(u.values, u.grid, theta)


# ====== 非永久冲击 ======

@dataclass
class TradePlan:
    """合并后的成交及其在一阶盘口上的深度"""
    times: np.ndarray
    shares: np.ndarray
    depths: np.ndarray
    prices: np.ndarray  # 成交时的 B
    values: np.ndarray  # 每笔的价值贡献

    @property
    def value(self) -> float:
        return math.fsum(self.values)

    def weight_functions(self, grid: Grid) -> Dict[str, GridFunction]:
        """修正项中 ∫_{-c_i}^0 x·Z^u dx 对应的配对函数"""
        return {
            f"trade_{i}": GridFunction(grid, cell_first_moment(grid, -c, 0.0) / grid.tick)
            for i, c in enumerate(self.depths)
        }


def _trade_value(u: GridFunction, b: float, theta: float, index: int):
    try:
        c = depth_for_shares(u, theta)
    except InfeasibleTradeError as e:
        raise InfeasibleTradeError(f"第 {index} 笔成交不可行：{e.message}", index=index, detail=e.detail) from e
    return c, b * theta + first_moment_between(u.values, u.grid, -c, 0.0)


def plan_trades(schedule: LiquidationSchedule, limit_path) -> TradePlan:
    """在一阶盘口 u(t_i) 上确定各笔深度（非永久冲击：盘口不受成交影响）"""
    agg = schedule.aggregated()
    first_index = _first_indices(schedule)
    depths, prices, values = [], [], []
    for i, (t, theta) in enumerate(zip(agg.times, agg.shares)):
        snap = limit_path.state_at(float(t))
        c, v = _trade_value(snap.u, snap.B, float(theta), first_index[i])
        depths.append(c)
        prices.append(snap.B)
        values.append(v)
    return TradePlan(agg.times, agg.shares, np.asarray(depths), np.asarray(prices), np.asarray(values))


def _first_indices(schedule: LiquidationSchedule) -> List[int]:
    if schedule.times.size == 0:
        return []
    return [0] + (np.flatnonzero(np.diff(schedule.times) > TIME_TOL) + 1).tolist()


def value_nonpermanent(schedule: LiquidationSchedule, limit_path) -> float:
    """
    V = Σ_i [B(t_i)θ_i + ∫_{-c_i}^0 x·u(t_i,x)dx]

    Raises:
        InfeasibleTradeError: 第 i 笔深度不可行
    """
    return plan_trades(schedule, limit_path).value


def correction_terms(plan: TradePlan, zb: np.ndarray, pairings: Dict[str, np.ndarray]) -> np.ndarray:
    """
    每条路径的 Σ_i [Z^B(t_i)θ_i + ∫_{-c_i}^0 x·Z^u(t_i,x)dx]

    Args:
        zb: (paths, 成交数)，第 i 列为第 i 笔成交时刻的 Z^B
        pairings: trade_i → (paths, 成交数)，取第 i 列
    """
    total = zb @ plan.shares
    for i in range(plan.shares.size):
        total = total + pairings[f"trade_{i}"][:, i]
    return total


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ConfigurationError("置信水平必须在 (0,1) 内",
                                 {"fields": [{"loc": "experiment.level", "msg": f"{level} 不在 (0,1)"}]})


def quantile_interval(value: float, corrections: np.ndarray, scale: float, level: float):
    """type-7 经验分位数"""
    _check_level(level)
    samples = value + scale * np.asarray(corrections, dtype=float)
    lo, hi = np.quantile(samples, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    return float(lo), float(hi)


def _interval(value, corrections, scale, level, regime: ScalingRegime, impact: str,
              min_paths: int) -> LiquidationInterval:
    _check_level(level)
    corrections = np.asarray(corrections, dtype=float)
    if corrections.size < min_paths:
        raise InsufficientSampleError(
            f"置信区间至少需要 {min_paths} 条极限路径",
            {"paths": int(corrections.size), "required": min_paths},
        )
    if not np.all(np.isfinite(corrections)):
        raise NumericError("修正项出现非有限值", {"bad": int(np.sum(~np.isfinite(corrections)))})
    lo, hi = quantile_interval(value, corrections, scale, level)
    return LiquidationInterval(V=value, lo=lo, hi=hi, level=level, M=int(corrections.size),
                               regime=regime.regime.value, impact=impact)


def ci_nonpermanent(
    plan: TradePlan,
    zb: np.ndarray,
    pairings: Dict[str, np.ndarray],
    regime: ScalingRegime,
    level: float = 0.9,
    min_paths: int = MIN_LIMIT_PATHS,
) -> LiquidationInterval:
    """
    V + √Δt·修正项 的经验分位数区间

    Args:
        zb / pairings: fast 区间极限蒙特卡洛在成交时刻的记录

    Raises:
        ConfigurationError: level 不在 (0,1)
        InsufficientSampleError: 极限路径少于 min_paths
    """
    return _interval(plan.value, correction_terms(plan, zb, pairings), math.sqrt(regime.dt), level,
                     regime, "non-permanent", min_paths)


# ====== 永久冲击 ======

@dataclass
class ImpactedLimitPath:
    """
    带成交跳的一阶路径

    segments[k] 覆盖 [t_k, t_{k+1}]；成交时刻取成交后的状态（右连续），
    成交前的状态保存在 pre_trade 中。
    """

    grid: Grid
    segments: List[LimitPath]
    trade_times: np.ndarray
    shares: np.ndarray
    depths: np.ndarray
    prices: np.ndarray  # 成交前的 B^θ
    values: np.ndarray
    pre_trade: List[LimitSnapshot] = field(default_factory=list)
    removed: np.ndarray = field(default_factory=lambda: np.zeros(0))  # 每笔实际移除的量
    cut_densities: np.ndarray = field(default_factory=lambda: np.zeros(0))  # 成交前 -c_i 处的密度

    @property
    def horizon(self) -> float:
        return self.segments[-1].horizon

    def _segment(self, t: float) -> LimitPath:
        for seg in reversed(self.segments):
            if seg.times[0] <= t + TIME_TOL:
                return seg
        return self.segments[0]

    def state_at(self, t: float) -> LimitSnapshot:
        return self._segment(t).state_at(t)

    def _series(self, t, attr: str):
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.array([float(getattr(self._segment(x), attr)(x)) for x in ts])
        return out if np.ndim(t) else float(out[0])

    def B_at(self, t):
        return self._series(t, "B_at")

    def Y_at(self, t):
        return self._series(t, "Y_at")

    @property
    def value(self) -> float:
        return math.fsum(self.values)

    def jumps(self) -> List[TradeJump]:
        """slow 区间涨落积分器使用的成交跳"""
        return [
            TradeJump(t=float(t), depth=float(c), cut_density=float(d))
            for t, c, d in zip(self.trade_times, self.depths, self.cut_densities)
        ]

    def to_frame(self) -> pd.DataFrame:
        return pd.concat([seg.to_frame() for seg in self.segments], ignore_index=True)


def _point_path(solver: FirstOrderSolver, t: float, b: float, v: np.ndarray) -> LimitPath:
    return LimitPath(
        grid=solver.grid,
        B0=solver.spec.B0,
        times=np.array([t]),
        B=np.array([b]),
        Y=np.array([solver.observe(b, v)]),
        values=v[None, :].copy(),
        interpolation=solver.interpolation,
    )


def _absolute_trade(v: np.ndarray, grid: Grid, b: float, offset: float, theta: float, index: int):
    """在绝对坐标的盘口 v 上卖出 θ：最优价位于 offset = B^θ - B0，返回 (c, 价值, 切点密度)"""
    try:
        c = depth_for_mass(v, grid, theta, top=offset)
    except InfeasibleTradeError as e:
        raise InfeasibleTradeError(f"第 {index} 笔成交不可行：{e.message}", index=index, detail=e.detail) from e
    lo = offset - c
    # ∫_{-c}^0 x u dx = ∫_{D-c}^{D} (z - D) v dz
    moment = first_moment_between(v, grid, lo, offset) - offset * mass_between(v, grid, lo, offset)
    cell = int(np.clip(grid.cell_of(lo if c > 0 else offset), grid.lo_index, grid.hi_index))
    return c, b * theta + moment, float(v[grid.position(cell)])


def _append_segment(segments: List[LimitPath], seg: LimitPath) -> None:
    # 成交后的单点路径由从它出发的积分段取代
    if segments and segments[-1].times.size == 1 and abs(segments[-1].times[0] - seg.times[0]) <= TIME_TOL:
        segments[-1] = seg
    else:
        segments.append(seg)


def impacted_first_order(
    schedule: LiquidationSchedule,
    spec: ModelSpec,
    regime: ScalingRegime,
    solver_dt: float,
    interpolation: InterpolationOrder = InterpolationOrder.LINEAR,
) -> ImpactedLimitPath:
    """
    成交跳与一阶流交替：在 t_i 处求深度 c_i，移除 (-c_i, 0] 上的量，B^θ -= c_i，
    然后按一阶方程演化到下一笔成交

    深度与移除都在绝对坐标下进行，移除量恰为 θ_i。

    Raises:
        InfeasibleTradeError: 第 i 笔成交不可行
    """
    solver = FirstOrderSolver(spec, regime, solver_dt, interpolation)
    grid = spec.grid
    agg = schedule.aggregated()
    first_index = _first_indices(schedule)
    horizon = regime.horizon

    t, b, v = 0.0, spec.B0, spec.u0.values.copy()
    segments: List[LimitPath] = []
    pre, depths, prices, values, removed, cuts = [], [], [], [], [], []
    for i, (t_i, theta) in enumerate(zip(agg.times, agg.shares)):
        t_i = float(min(t_i, horizon))
        if t_i > t + TIME_TOL:
            seg = solver.integrate(t, t_i, b, v)
            _append_segment(segments, seg)
            b, v = float(seg.B[-1]), seg.values[-1].copy()
        elif not segments:
            segments.append(_point_path(solver, t, b, v))
        t = t_i
        pre.append(segments[-1].state_at(t))
        offset = b - spec.B0
        c, value, cut = _absolute_trade(v, grid, b, offset, float(theta), first_index[i])
        before = grid.tick * float(v.sum())
        v = remove_between(v, grid, offset - c, offset)
        removed.append(before - grid.tick * float(v.sum()))
        depths.append(c)
        prices.append(b)
        values.append(value)
        cuts.append(cut)
        b -= c
        logger.debug(f"永久冲击成交 {i}: t={t:.6g}, θ={theta:.6g}, c={c:.6g}")
        segments.append(_point_path(solver, t, b, v))

    if t < horizon - TIME_TOL or not segments:
        _append_segment(segments, solver.integrate(t, horizon, b, v))

    path = ImpactedLimitPath(
        grid=grid,
        segments=segments,
        trade_times=agg.times,
        shares=agg.shares,
        depths=np.asarray(depths),
        prices=np.asarray(prices),
        values=np.asarray(values),
        pre_trade=pre,
        removed=np.asarray(removed),
        cut_densities=np.asarray(cuts),
    )
    if depths:
        logger.info(f"永久冲击一阶路径完成: {len(depths)} 笔成交, B^θ_T={path.B_at(horizon):.6g}")
    return path


def value_permanent(impacted: ImpactedLimitPath) -> float:
    """V(θ) = Σ_i [B^θ(t_i)θ_i + ∫_{-c_i}^0 x·u^θ(t_i,x)dx]，取成交前状态"""
    return impacted.value


def permanent_plan(impacted: ImpactedLimitPath) -> TradePlan:
    return TradePlan(impacted.trade_times, impacted.shares, impacted.depths, impacted.prices, impacted.values)


def ci_permanent(
    impacted: ImpactedLimitPath,
    zb: np.ndarray,
    pairings: Dict[str, np.ndarray],
    regime: ScalingRegime,
    level: float = 0.9,
    min_paths: int = MIN_LIMIT_PATHS,
) -> LiquidationInterval:
    """
    V(θ) + √Δx·修正项 的经验分位数区间

    Args:
        zb / pairings: 沿带跳路径积分的 slow 区间涨落在成交前的记录
    """
    return _interval(impacted.value, correction_terms(permanent_plan(impacted), zb, pairings),
                     math.sqrt(regime.dx), level, regime, "permanent", min_paths)


def realized_value(batch: DiscretePathBatch) -> np.ndarray:
    """离散模拟中各条未中止路径的清算价值 V(θ^(n))"""
    keep = ~batch.aborted
    return batch.trade_values[keep].sum(axis=1)


def coverage(realized: np.ndarray, interval: LiquidationInterval) -> float:
    """实现值落入区间的比例"""
    realized = np.asarray(realized, dtype=float)
    if realized.size == 0:
        return math.nan
    return float(np.mean((realized >= interval.lo) & (realized <= interval.hi)))
