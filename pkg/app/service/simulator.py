"""
离散事件模拟器

逐事件模拟第 n 级模型 S^(n) = (B^(n), u^(n))：
  - A 事件：价格下跌一格，相对密度右移（T_-）
  - B 事件：价格上涨一格，相对密度左移（T_+）
  - C 事件：在 π 所在格子加入 Δv·ω/Δx

多条路径按批并行推进（paths × cells 数组），每条路径有独立的随机数流，
种子为 master_seed XOR path_index，因此结果与批的划分无关。
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from app.core.depth import cell_first_moment, depth_for_mass, remove_between
from app.core.exceptions import GridMismatchError, InfeasibleTradeError, ModelValidityError
from app.core.grid import GridFunction, ShiftDirection, shift_array, shift_values
from app.core.model import ModelSpec
from app.core.scaling import ScalingRegime

logger = logging.getLogger(__name__)

# 增量 Y 与完整重算的对账间隔（事件数）
Y_CHECK_INTERVAL = 10_000
# 每次生成的均匀随机数块长度
DRAW_BLOCK = 4096


class EventKind(str, Enum):
    A = "A"  # 市价卖单，价格下跌
    B = "B"  # 价格上涨
    C = "C"  # 限价单挂单/撤单


@dataclass
class EventDraw:
    kind: EventKind
    omega: float = 0.0  # 订单量（仅 C）
    pi: float = 0.0  # 挂单位置（仅 C）


@dataclass
class BookState:
    """单条路径的状态 S_k^(n)"""
    B: float  # 最优买价
    u: GridFunction  # 相对量密度
    Y: float  # 缓存的 ⟨h, u⟩
    k: int = 0  # 事件计数
    lost_mass: float = 0.0  # 平移出窗口的累计量


def path_rng(master_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """路径随机数流：stream 0 给离散模拟，其余编号给极限侧蒙特卡洛"""
    seed = int(master_seed) ^ int(index)
    if stream == 0:
        return np.random.default_rng(seed)
    return np.random.default_rng([seed, int(stream)])


def initial_state(spec: ModelSpec) -> BookState:
    return BookState(B=spec.B0, u=spec.u0.copy(), Y=spec.initial_y())


def _check_grid(spec: ModelSpec, regime: ScalingRegime) -> None:
    if abs(spec.grid.tick - regime.dx) > 1e-12 * regime.dx:
        raise GridMismatchError(
            "离散模拟要求网格 tick 等于 Δx",
            {"tick": spec.grid.tick, "dx": regime.dx},
        )


def _classify(u0: np.ndarray, pa, pb, dp: float) -> np.ndarray:
    """单个均匀数划分 [0, Δp·pA) → A, [Δp·pA, Δp·(pA+pB)) → B, 其余 → C；返回 0/1/2"""
    first = dp * pa
    second = first + dp * pb
    if np.any(second > 1.0 + 1e-12):
        raise ModelValidityError("价格事件概率溢出：Δp·(pA+pB) > 1", {"value": float(np.max(second))})
    return np.where(u0 < first, 0, np.where(u0 < second, 1, 2))


def sample_event(state: BookState, spec: ModelSpec, regime: ScalingRegime, rng: np.random.Generator) -> EventDraw:
    """
    抽取一个事件

    Raises:
        ModelValidityError: Δp·(pA+pB) > 1
    """
    draws = rng.random(3)
    pa, pb = spec.intensities(state.B, state.Y)
    kind = int(_classify(draws[0], pa, pb, regime.dp))
    if kind == 0:
        return EventDraw(EventKind.A)
    if kind == 1:
        return EventDraw(EventKind.B)
    b, y = np.array([state.B]), np.array([state.Y])
    omega = float(spec.omega_sampler(b, y, draws[1:2])[0])
    pi = float(spec.pi_sampler(b, y, draws[2:3])[0])
    return EventDraw(EventKind.C, omega=omega, pi=pi)


def apply_event(state: BookState, ev: EventDraw, regime: ScalingRegime, spec: ModelSpec) -> BookState:
    """执行事件，返回新状态（不修改输入）"""
    grid = state.u.grid
    h = spec.h.values
    if ev.kind is EventKind.C:
        values = state.u.values.copy()
        pos = int(grid.cell_of(ev.pi)) - grid.lo_index
        if not 0 <= pos < grid.n_cells:
            return BookState(state.B, state.u.copy(), state.Y, state.k + 1, state.lost_mass + regime.dv * abs(ev.omega))
        values[pos] += regime.dv * ev.omega / grid.tick
        y = state.Y + regime.dv * ev.omega * h[pos]
        return BookState(state.B, GridFunction(grid, values), y, state.k + 1, state.lost_mass)

    if ev.kind is EventKind.A:
        values, lost = shift_values(state.u.values, ShiftDirection.MINUS)
        b = state.B - regime.dx
    else:
        values, lost = shift_values(state.u.values, ShiftDirection.PLUS)
        b = state.B + regime.dx
    y = float(grid.tick * (values * h).sum())
    return BookState(b, GridFunction(grid, values), y, state.k + 1, state.lost_mass + grid.tick * abs(float(lost)))


# ====== 批量模拟 ======

@dataclass
class TradeRecord:
    """离散盘口上的一次成交"""
    step: int
    shares: float


@dataclass
class DiscretePath:
    """单条离散路径"""
    path_id: int
    times: np.ndarray
    B: np.ndarray
    Y: np.ndarray
    snapshot_steps: np.ndarray
    snapshots: List[GridFunction]
    pairings: Dict[str, np.ndarray]
    lost_mass: float
    y_drift: float
    aborted: bool
    omega_sum: float
    trade_values: np.ndarray


@dataclass
class DiscretePathBatch:
    """一批离散路径，数组第一维为路径"""
    path_ids: np.ndarray
    regime: ScalingRegime
    times: np.ndarray
    B: np.ndarray
    Y: np.ndarray
    snapshot_steps: np.ndarray
    pairings: Dict[str, np.ndarray]
    lost_mass: np.ndarray
    y_drift: np.ndarray
    aborted: np.ndarray
    omega_sum: np.ndarray
    trade_values: np.ndarray
    snapshots: Optional[np.ndarray] = None
    grid: Optional[object] = None

    @property
    def size(self) -> int:
        return int(self.path_ids.size)

    def path(self, i: int) -> DiscretePath:
        snaps = []
        if self.snapshots is not None:
            snaps = [GridFunction(self.grid, self.snapshots[i, s]) for s in range(self.snapshot_steps.size)]
        return DiscretePath(
            path_id=int(self.path_ids[i]),
            times=self.times,
            B=self.B[i],
            Y=self.Y[i],
            snapshot_steps=self.snapshot_steps,
            snapshots=snaps,
            pairings={name: arr[i] for name, arr in self.pairings.items()},
            lost_mass=float(self.lost_mass[i]),
            y_drift=float(self.y_drift[i]),
            aborted=bool(self.aborted[i]),
            omega_sum=float(self.omega_sum[i]),
            trade_values=self.trade_values[i],
        )


def snapshot_schedule(n_events: int, count: int, extra: Iterable[int] = ()) -> np.ndarray:
    """count 个等距快照步（含 0 与 T_n），再并入额外步"""
    base = np.round(np.linspace(0, n_events, max(count, 1) + 1)).astype(np.int64)
    merged = np.concatenate([base, np.asarray(list(extra), dtype=np.int64)])
    merged = merged[(merged >= 0) & (merged <= n_events)]
    return np.unique(merged)


class BookSimulator:
    """
    批量离散模拟器

    Args:
        spec: 模型
        regime: 尺度参数
        test_functions: 在快照步计算配对 ⟨u, φ⟩ 的测试函数
        snapshot_count: 等距快照数（缺省 100）
        extra_snapshot_steps: 额外快照步（边际时刻、成交时刻）
        keep_snapshots: 是否保存 u 快照本身
        trades: 成交计划（步 → 股数），在状态 S_k 上执行
        permanent: 成交是否永久改变盘口
    """

    def __init__(
        self,
        spec: ModelSpec,
        regime: ScalingRegime,
        test_functions: Optional[Mapping[str, GridFunction]] = None,
        snapshot_count: int = 100,
        extra_snapshot_steps: Iterable[int] = (),
        keep_snapshots: bool = False,
        trades: Sequence[TradeRecord] = (),
        permanent: bool = False,
    ):
        _check_grid(spec, regime)
        self.spec = spec
        self.regime = regime
        self.grid = spec.grid
        self.test_functions = dict(test_functions or {})
        for name, phi in self.test_functions.items():
            self.grid.check_same(phi.grid)
        self.trades = sorted(trades, key=lambda t: t.step)
        trade_steps = [t.step for t in self.trades]
        self.snapshot_steps = snapshot_schedule(regime.n_events, snapshot_count, list(extra_snapshot_steps) + trade_steps)
        self.keep_snapshots = keep_snapshots
        self.permanent = permanent
        # 允许的最大价格偏移（格数）：新挂单支撑 [-M, M] 之外的余量
        allowance = self.grid.half_width - spec.bound
        self.max_offset_ticks = int(np.floor(max(allowance, 0.0) / self.grid.tick))

    def run(self, master_seed: int, path_ids: Sequence[int]) -> DiscretePathBatch:
        """模拟一批路径，结果只依赖种子与路径编号"""
        spec, regime, grid = self.spec, self.regime, self.grid
        ids = np.asarray(list(path_ids), dtype=np.int64)
        m, n_events, n_cells = ids.size, regime.n_events, grid.n_cells
        rngs = [path_rng(master_seed, int(i)) for i in ids]

        h = spec.h.values
        tick, dv, dx = grid.tick, regime.dv, regime.dx
        u = np.tile(spec.u0.values, (m, 1))
        ticks = np.zeros(m, dtype=np.int64)
        y = np.full(m, spec.initial_y())
        lost = np.zeros(m)
        drift = np.zeros(m)
        omega_sum = np.zeros(m)
        alive = np.ones(m, dtype=bool)

        B_series = np.empty((m, n_events + 1))
        Y_series = np.empty((m, n_events + 1))
        snap_steps = self.snapshot_steps
        phi_names = list(self.test_functions)
        phi_matrix = (np.stack([self.test_functions[n].values for n in phi_names], axis=1)
                      if phi_names else np.zeros((n_cells, 0)))
        pair_store = np.zeros((m, snap_steps.size, len(phi_names)))
        snap_store = np.zeros((m, snap_steps.size, n_cells)) if self.keep_snapshots else None
        trade_values = np.zeros((m, len(self.trades)))
        trades_at: Dict[int, List[int]] = {}
        for idx, trade in enumerate(self.trades):
            trades_at.setdefault(trade.step, []).append(idx)

        snap_cursor = 0
        block = None
        for k in range(n_events + 1):
            b = spec.B0 + ticks * dx

            # 成交在状态 S_k 上执行
            for t_idx in trades_at.get(k, ()):
                theta = self.trades[t_idx].shares
                for row in np.flatnonzero(alive):
                    value, removed_ticks = self._execute(u, row, theta, float(b[row]), t_idx)
                    trade_values[row, t_idx] = value
                    if self.permanent and removed_ticks >= 0:
                        ticks[row] -= removed_ticks
                        y[row] = tick * float((u[row] * h).sum())
                b = spec.B0 + ticks * dx

            B_series[:, k] = b
            Y_series[:, k] = y
            if snap_cursor < snap_steps.size and snap_steps[snap_cursor] == k:
                pair_store[:, snap_cursor, :] = tick * (u @ phi_matrix)
                if snap_store is not None:
                    snap_store[:, snap_cursor, :] = u
                snap_cursor += 1
            if k == n_events:
                break

            s = k % DRAW_BLOCK
            if s == 0:
                length = min(DRAW_BLOCK, n_events - k)
                block = np.stack([rng.random((length, 3)) for rng in rngs])
            draws = block[:, s, :]

            pa, pb = spec.intensities(b, y)
            kind = _classify(draws[:, 0], np.broadcast_to(pa, (m,)), np.broadcast_to(pb, (m,)), regime.dp)

            rows_c = np.flatnonzero((kind == 2) & alive)
            if rows_c.size:
                omega = np.asarray(spec.omega_sampler(b[rows_c], y[rows_c], draws[rows_c, 1]), dtype=float)
                pos = grid.cell_of(spec.pi_sampler(b[rows_c], y[rows_c], draws[rows_c, 2])) - grid.lo_index
                inside = (pos >= 0) & (pos < n_cells)
                if not np.all(inside):
                    lost[rows_c[~inside]] += dv * np.abs(omega[~inside])
                rc, pc, oc = rows_c[inside], pos[inside], omega[inside]
                u[rc, pc] += dv * oc / tick
                y[rc] += dv * oc * h[pc]
                omega_sum[rc] += oc

            for code, direction, step_ticks in ((0, ShiftDirection.MINUS, -1), (1, ShiftDirection.PLUS, 1)):
                rows = np.flatnonzero((kind == code) & alive)
                if rows.size:
                    shifted, out = shift_values(u[rows], direction)
                    u[rows] = shifted
                    lost[rows] += tick * np.abs(out)
                    ticks[rows] += step_ticks
                    y[rows] = tick * (shifted * h).sum(axis=1)

            escaped = alive & (np.abs(ticks) > self.max_offset_ticks)
            if np.any(escaped):
                alive &= ~escaped
                logger.warning(f"{int(escaped.sum())} 条路径价格离开窗口，已中止 (k={k + 1})")

            if (k + 1) % Y_CHECK_INTERVAL == 0:
                full = tick * (u * h).sum(axis=1)
                scale = np.maximum(np.abs(full), 1.0)
                drift = np.maximum(drift, np.abs(full - y) / scale)
                y = full

        return DiscretePathBatch(
            path_ids=ids,
            regime=regime,
            times=np.arange(n_events + 1) * regime.dt,
            B=B_series,
            Y=Y_series,
            snapshot_steps=snap_steps,
            pairings={name: pair_store[:, :, j] for j, name in enumerate(phi_names)},
            lost_mass=lost,
            y_drift=drift,
            aborted=~alive,
            omega_sum=omega_sum,
            trade_values=trade_values,
            snapshots=snap_store,
            grid=grid,
        )

    def _execute(self, u: np.ndarray, row: int, theta: float, b: float, index: int):
        """在第 row 条路径上卖出 θ 股，返回 (成交额, 永久冲击下移动的格数)"""
        grid = self.grid
        try:
            depth = depth_for_mass(u[row], grid, theta)
        except InfeasibleTradeError as e:
            raise InfeasibleTradeError(e.message, index=index, detail=e.detail) from e
        value = b * theta + float(np.dot(u[row], cell_first_moment(grid, -depth, 0.0)))
        if not self.permanent:
            return value, -1
        shift_ticks = int(np.floor(depth / grid.tick + 1e-12))
        u[row] = shift_array(remove_between(u[row], grid, -depth, 0.0), shift_ticks)
        return value, shift_ticks


def simulate_path(
    spec: ModelSpec,
    regime: ScalingRegime,
    rng_seed: int,
    snapshot_count: int = 100,
    test_functions: Optional[Mapping[str, GridFunction]] = None,
) -> DiscretePath:
    """
    模拟单条路径，返回全分辨率 (B_k, Y_k) 与稀疏 u 快照

    种子直接作为该路径的随机数种子。
    """
    simulator = BookSimulator(spec, regime, test_functions=test_functions,
                              snapshot_count=snapshot_count, keep_snapshots=True)
    batch = simulator.run(master_seed=rng_seed, path_ids=[0])
    return batch.path(0)
