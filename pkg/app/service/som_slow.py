"""
slow 区间二阶极限

只有价格噪声 W 在极限中存活：
    dZ^B = p_b Z^B dt + p_y Z^Y dt + σ_B dW
    Z^Y_t = ∫⟨f_b(s), h(·+B_s-B_t)⟩Z^B_s ds + ∫⟨f_y(s), h(·+B_s-B_t)⟩Z^Y_s ds
          + ∫⟨f(s), h'(·+B_s-B_t)⟩Z^B_s ds - Z^B_t⟨u(t), h'⟩
Z^u 用弱形式输运方程推进（迎风格式），Volterra 表示作为参照：
    dZ^u = ∂_x u dZ^B + ∂_x Z^u dB + f_b Z^B dt + f_y Z^Y dt
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.depth import mass_between, remove_between
from app.core.exceptions import RangeError
from app.core.grid import Grid, GridFunction, derivative, shift_array
from app.core.model import ModelSpec
from app.core.scaling import ScalingRegime
from app.service.fom_solver import LimitSnapshot
from app.service.simulator import path_rng

logger = logging.getLogger(__name__)

HISTORY_BUDGET = 4096
# 迎风格式的 Courant 数上限
CFL_TARGET = 0.9


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    """非均匀节点上的梯形权重"""
    w = np.zeros_like(times, dtype=float)
    if times.size < 2:
        return w
    d = np.diff(times)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def shifted_rows(values: np.ndarray, distances: np.ndarray, tick: float) -> np.ndarray:
    """第 j 行为 values(x + distances[j])，格间线性插值，窗口外取 0"""
    n = values.size
    pos = np.arange(n)[None, :] + (np.asarray(distances, dtype=float) / tick)[:, None]
    lo = np.floor(pos)
    w = pos - lo
    lo = lo.astype(np.int64)

    def take(idx):
        inside = (idx >= 0) & (idx < n)
        return np.where(inside, values[np.clip(idx, 0, n - 1)], 0.0)

    return (1.0 - w) * take(lo) + w * take(lo + 1)


class VolterraHistory:
    """
    Volterra 表示所需的历史

    节点上缓存 (t, B, f, f_b, f_y) 以及每条路径的 (Z^B, Z^Y)。
    节点数超过预算时丢弃奇数节点（保留最新节点），梯形权重按非均匀节点重算。
    """

    def __init__(self, spec: ModelSpec, n_paths: int, budget: int = HISTORY_BUDGET):
        self.spec = spec
        self.grid = spec.grid
        self.budget = max(int(budget), 4)
        cap, cells = self.budget + 1, self.grid.n_cells
        self.t = np.zeros(cap)
        self.B = np.zeros(cap)
        self.f = np.zeros((cap, cells))
        self.fb = np.zeros((cap, cells))
        self.fy = np.zeros((cap, cells))
        self.zb = np.zeros((n_paths, cap))
        self.zy = np.zeros((n_paths, cap))
        self.size = 0
        self.coarsenings = 0

    @property
    def last_time(self) -> float:
        return float(self.t[self.size - 1]) if self.size else -math.inf

    def coarsen(self) -> None:
        n = self.size
        keep = np.unique(np.concatenate([np.arange(0, n, 2), [n - 1]]))
        k = keep.size
        for arr in (self.t, self.B):
            arr[:k] = arr[keep]
        for arr in (self.f, self.fb, self.fy):
            arr[:k] = arr[keep]
        self.zb[:, :k] = self.zb[:, keep]
        self.zy[:, :k] = self.zy[:, keep]
        self.size = k
        self.coarsenings += 1
        logger.warning(f"Volterra 历史超过预算 {self.budget}，已稀疏为 {k} 个节点 (t={self.t[k - 1]:.6g})")

    def append(self, snap: LimitSnapshot, zb: np.ndarray, zy: np.ndarray) -> None:
        if self.size > self.budget:
            self.coarsen()
        i = self.size
        spec = self.spec
        self.t[i], self.B[i] = snap.t, snap.B
        self.f[i] = spec.f(snap.B, snap.Y).values
        self.fb[i] = spec.fb(snap.B, snap.Y).values
        self.fy[i] = spec.fy(snap.B, snap.Y).values
        self.zb[:, i] = zb
        self.zy[:, i] = zy
        self.size += 1

    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.t[: self.size])

    def kernels(self, phi: np.ndarray, phi_prime: np.ndarray, b_t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """各节点上的 ⟨f_b(s), φ(·+B_s-B_t)⟩、⟨f_y(s), φ(·+B_s-B_t)⟩、⟨f(s), φ'(·+B_s-B_t)⟩"""
        n, tick = self.size, self.grid.tick
        dist = self.B[:n] - b_t
        rows = shifted_rows(phi, dist, tick)
        rows_prime = shifted_rows(phi_prime, dist, tick)
        k_b = tick * np.einsum("ij,ij->i", self.fb[:n], rows)
        k_y = tick * np.einsum("ij,ij->i", self.fy[:n], rows)
        k_f = tick * np.einsum("ij,ij->i", self.f[:n], rows_prime)
        return k_b, k_y, k_f

    def solve_latest_zy(self, u_t: GridFunction) -> np.ndarray:
        """最新节点上隐式梯形求 Z^Y（对角项单独解出）"""
        spec = self.spec
        last = self.size - 1
        k_b, k_y, k_f = self.kernels(spec.h.values, spec.h_prime.values, float(self.B[last]))
        w = self.weights()
        zb_t = self.zb[:, last]
        explicit = self.zb[:, :last] @ (w[:last] * (k_b[:last] + k_f[:last])) + self.zy[:, :last] @ (w[:last] * k_y[:last])
        explicit += w[last] * (k_b[last] + k_f[last]) * zb_t
        explicit -= zb_t * self.grid.tick * float(np.dot(u_t.values, spec.h_prime.values))
        zy = explicit / (1.0 - w[last] * k_y[last])
        self.zy[:, last] = zy
        return zy

    def evaluate(self, phi: GridFunction, t: float, u_t: GridFunction) -> np.ndarray:
        """
        ⟨Z^u_t, φ⟩ 的 Volterra 表示（每条路径一个值）

        Raises:
            RangeError: t 超出历史或不是历史节点
        """
        if self.size == 0 or t > self.last_time + 1e-12:
            raise RangeError("t 超出 Volterra 历史", {"t": t, "last": self.last_time})
        n = int(np.searchsorted(self.t[: self.size], t + 1e-12, side="right"))
        if n == 0 or abs(self.t[n - 1] - t) > 1e-9:
            raise RangeError("t 不是历史节点", {"t": t})
        saved = self.size
        self.size = n
        try:
            phi_prime = derivative(phi).values
            k_b, k_y, k_f = self.kernels(phi.values, phi_prime, float(self.B[n - 1]))
            w = self.weights()
        finally:
            self.size = saved
        zb, zy = self.zb[:, :n], self.zy[:, :n]
        out = zb @ (w * (k_b + k_f)) + zy @ (w * k_y)
        return out - zb[:, n - 1] * self.grid.tick * float(np.dot(u_t.values, phi_prime))


@dataclass
class _SlowCoefficients:
    pb: float
    py: float
    sigma: float
    speed: float  # dB/dt = p^{B-A}
    du: np.ndarray
    fb: np.ndarray
    fy: np.ndarray


def _coefficients(spec: ModelSpec, snap: LimitSnapshot) -> _SlowCoefficients:
    b, y = snap.B, snap.Y
    return _SlowCoefficients(
        pb=spec.pb(b, y),
        py=spec.py(b, y),
        sigma=float(spec.sigma_b(b, y)),
        speed=float(spec.p_ba(b, y)),
        du=snap.du.values,
        fb=spec.fb(b, y).values,
        fy=spec.fy(b, y).values,
    )


def transport(zu: np.ndarray, displacement: float, tick: float) -> Tuple[np.ndarray, int]:
    """
    迎风推进 ∂_t Z = c ∂_x Z 一段位移 c·dt，返回 (结果, 子步数)

    c > 0 用前向差分，c < 0 用后向差分；窗口外视为 0。
    """
    if displacement == 0.0:
        return zu, 1
    n_sub = max(1, int(math.ceil(abs(displacement) / (CFL_TARGET * tick))))
    courant = displacement / n_sub / tick
    out = zu.copy()
    for _ in range(n_sub):
        diff = np.zeros_like(out)
        if courant > 0:
            diff[..., :-1] = out[..., 1:] - out[..., :-1]
            diff[..., -1] = -out[..., -1]
        else:
            diff[..., 1:] = out[..., 1:] - out[..., :-1]
            diff[..., 0] = out[..., 0]
        out = out + courant * diff
    return out, n_sub


def _zb_next(zb, zy, c: _SlowCoefficients, dt: float, normals: np.ndarray) -> np.ndarray:
    return zb + (c.pb * zb + c.py * zy) * dt + c.sigma * math.sqrt(dt) * normals


def _zu_next(zu, zb, zb_next, zy, c: _SlowCoefficients, dt: float, tick: float) -> Tuple[np.ndarray, int]:
    out = zu + np.multiply.outer(zb_next - zb, c.du) + np.multiply.outer(zb * dt, c.fb) + np.multiply.outer(zy * dt, c.fy)
    return transport(out, c.speed * dt, tick)


@dataclass
class TradeJump:
    """永久冲击成交在极限路径上的跳：深度 c 与成交前 -c 处的密度"""
    t: float
    depth: float
    cut_density: float


def apply_trade_jump(zb: np.ndarray, zu: np.ndarray, jump: TradeJump, grid: Grid) -> Tuple[np.ndarray, np.ndarray]:
    """
    成交时的涨落跳

    被吃掉区间上的 Z^u 量决定深度的涨落 δ = -∫_{-c}^0 Z^u / u(-c)；
    价格涨落跳 -δ，剩余 Z^u 随盘口一起平移 c，吃掉的量放回新的最优价格子，总量守恒。
    """
    removed = np.array([mass_between(row, grid, -jump.depth, 0.0) for row in np.atleast_2d(zu)])
    # 0/0 := 0
    shift_zb = removed / jump.cut_density if jump.cut_density != 0.0 else np.zeros_like(removed)
    rest = remove_between(np.atleast_2d(zu), grid, -jump.depth, 0.0)
    moved = shift_array(rest, jump.depth / grid.tick)
    moved[..., grid.position(0)] += removed / grid.tick
    return zb + shift_zb, moved.reshape(zu.shape)


# ====== 单路径接口 ======

@dataclass
class SlowLimitState:
    """单条路径的 slow 区间涨落状态"""
    ZB: float
    ZY: float
    Zu: GridFunction
    history: VolterraHistory = field(repr=False)
    t: float = 0.0

    @classmethod
    def initial(cls, spec: ModelSpec, snap0: LimitSnapshot, zb0: float = 0.0,
                budget: int = HISTORY_BUDGET) -> "SlowLimitState":
        """t=0 的状态；Z^B(0)=zb0 时 Z^u(0)=zb0·∂_x u0，Z^Y(0)=-zb0⟨u0,h'⟩"""
        history = VolterraHistory(spec, n_paths=1, budget=budget)
        zy0 = -zb0 * spec.grid.tick * float(np.dot(snap0.u.values, spec.h_prime.values))
        history.append(snap0, np.array([zb0]), np.array([zy0]))
        return cls(ZB=zb0, ZY=zy0, Zu=GridFunction(spec.grid, zb0 * snap0.du.values), history=history, t=snap0.t)


def step_zb_zy(state: SlowLimitState, limit_path, spec: ModelSpec, dt_sde: float,
               rng: np.random.Generator) -> Tuple[float, float]:
    """
    推进 (Z^B, Z^Y) 一步；新节点写入 state.history

    Returns:
        (Z^B, Z^Y) 在 t + dt_sde 的值
    """
    c = _coefficients(spec, limit_path.state_at(state.t))
    zb_next = _zb_next(np.array([state.ZB]), np.array([state.ZY]), c, dt_sde, rng.standard_normal(1))
    snap_next = limit_path.state_at(min(state.t + dt_sde, limit_path.horizon))
    state.history.append(snap_next, zb_next, np.zeros(1))
    zy_next = state.history.solve_latest_zy(snap_next.u)
    return float(zb_next[0]), float(zy_next[0])


def step_zu_weak(state: SlowLimitState, zb_next: float, limit_path, spec: ModelSpec, dt_sde: float) -> GridFunction:
    """用本步 Z^B 增量推进 Z^u（CFL 超限时自动分子步）"""
    c = _coefficients(spec, limit_path.state_at(state.t))
    zu, _ = _zu_next(state.Zu.values[None, :], np.array([state.ZB]), np.array([zb_next]),
                     np.array([state.ZY]), c, dt_sde, spec.grid.tick)
    return GridFunction(spec.grid, zu[0])


def advance_slow(state: SlowLimitState, limit_path, spec: ModelSpec, dt_sde: float,
                 rng: np.random.Generator) -> SlowLimitState:
    zb, zy = step_zb_zy(state, limit_path, spec, dt_sde, rng)
    zu = step_zu_weak(state, zb, limit_path, spec, dt_sde)
    return SlowLimitState(ZB=zb, ZY=zy, Zu=zu, history=state.history, t=state.t + dt_sde)


def evaluate_zu_volterra(phi: GridFunction, t: float, history: VolterraHistory, limit_path) -> np.ndarray:
    """
    ⟨Z^u_t, φ⟩ 的 Volterra 表示（每条路径一个值）

    Raises:
        RangeError: t 超出历史
    """
    if t > history.last_time + 1e-12:
        raise RangeError("t 超出 Volterra 历史", {"t": t, "last": history.last_time})
    return history.evaluate(phi, t, limit_path.state_at(t).u)


# ====== 批量积分 ======

@dataclass
class SlowMonteCarloResult:
    """slow 区间极限侧蒙特卡洛结果（第一维为路径）"""
    path_ids: np.ndarray
    record_times: np.ndarray
    ZB: np.ndarray
    ZY: np.ndarray
    pairings: Dict[str, np.ndarray]
    volterra_pairings: Dict[str, np.ndarray]
    zy_gap: np.ndarray
    coarsenings: int = 0
    max_substeps: int = 1
    terminal_zu: Optional[np.ndarray] = None  # 终端 Z^u 快照（paths × cells），按需保存


class SlowFluctuationSolver:
    """
    slow 区间二阶极限的批量积分器

    Args:
        spec: 模型
        regime: slow 区间尺度参数
        limit_path: 一阶极限（可以是带成交跳的路径，此时 state_at 取成交后的状态）
        dt_sde: 时间步长
        substeps: 每步由多少个细步的噪声合成
        trades: 永久冲击成交跳；非空时 Z^Y 取 ⟨Z^u, h⟩，不再走 Volterra
        history_budget: Volterra 历史节点预算
    """

    def __init__(
        self,
        spec: ModelSpec,
        regime: ScalingRegime,
        limit_path,
        dt_sde: float,
        substeps: int = 1,
        trades: Sequence[TradeJump] = (),
        history_budget: int = HISTORY_BUDGET,
    ):
        spec.grid.check_same(limit_path.grid)
        self.spec = spec
        self.regime = regime
        self.limit_path = limit_path
        self.n_steps = max(1, int(round(regime.horizon / dt_sde)))
        self.dt = regime.horizon / self.n_steps
        self.substeps = max(1, int(substeps))
        self.history_budget = history_budget
        self.trades_at: Dict[int, List[TradeJump]] = {}
        for jump in trades:
            self.trades_at.setdefault(int(round(jump.t / self.dt)), []).append(jump)
        self.use_volterra = not self.trades_at

    def record_steps(self, record_times: Sequence[float]) -> np.ndarray:
        return np.clip(np.round(np.asarray(record_times, dtype=float) / self.dt).astype(np.int64), 0, self.n_steps)

    def _draw(self, rngs: List[np.random.Generator]) -> np.ndarray:
        r = self.substeps
        return np.array([rng.standard_normal(r).sum() for rng in rngs]) / math.sqrt(r)

    def run(
        self,
        master_seed: int,
        path_ids: Sequence[int],
        record_times: Sequence[float],
        test_functions: Optional[Mapping[str, GridFunction]] = None,
        stream: int = 2,
        zb0: float = 0.0,
        volterra_check: bool = False,
        keep_terminal: bool = False,
    ) -> SlowMonteCarloResult:
        """
        积分一批路径

        记录在 record_times（取最近步）进行，成交跳之前记录。
        volterra_check 为真时同时记录测试函数配对的 Volterra 值。
        keep_terminal 为真时保留终端 Z^u（弱形式状态）。
        """
        spec, grid = self.spec, self.spec.grid
        tick, h = grid.tick, spec.h.values
        ids = np.asarray(list(path_ids), dtype=np.int64)
        m = ids.size
        rngs = [path_rng(master_seed, int(i), stream) for i in ids]
        steps = self.record_steps(record_times)
        tests = dict(test_functions or {})
        names = list(tests)
        phi = np.stack([tests[n].values for n in names], axis=1) if names else np.zeros((grid.n_cells, 0))
        check = volterra_check and self.use_volterra

        snap = self.limit_path.state_at(0.0)
        zb = np.full(m, float(zb0))
        zy = np.full(m, -float(zb0) * tick * float(np.dot(snap.u.values, spec.h_prime.values)))
        zu = np.multiply.outer(zb, snap.du.values)
        history = None
        if self.use_volterra:
            history = VolterraHistory(spec, m, self.history_budget)
            history.append(snap, zb, zy)

        rec_zb = np.zeros((m, steps.size))
        rec_zy = np.zeros((m, steps.size))
        rec_pair = np.zeros((m, steps.size, len(names)))
        rec_volt = np.zeros((m, steps.size, len(names)))
        gap = np.zeros(m)
        max_sub = 1

        def record(k: int, u_t: GridFunction):
            for r in np.flatnonzero(steps == k):
                rec_zb[:, r] = zb
                rec_zy[:, r] = zy
                rec_pair[:, r, :] = tick * (zu @ phi)
                if check:
                    for j, name in enumerate(names):
                        rec_volt[:, r, j] = history.evaluate(tests[name], k * self.dt, u_t)

        def jumps(k: int):
            nonlocal zb, zu, zy
            for jump in self.trades_at.get(k, ()):
                zb, zu = apply_trade_jump(zb, zu, jump, grid)
                zy = tick * (zu @ h)

        record(0, snap.u)
        jumps(0)
        for k in range(self.n_steps):
            c = _coefficients(spec, self.limit_path.state_at(k * self.dt))
            normals = self._draw(rngs)
            zb_next = _zb_next(zb, zy, c, self.dt, normals)
            zu, n_sub = _zu_next(zu, zb, zb_next, zy, c, self.dt, tick)
            max_sub = max(max_sub, n_sub)
            zb = zb_next
            snap = self.limit_path.state_at(min((k + 1) * self.dt, self.limit_path.horizon))
            if self.use_volterra:
                history.append(snap, zb, np.zeros(m))
                zy = history.solve_latest_zy(snap.u)
            else:
                zy = tick * (zu @ h)
            gap = np.maximum(gap, np.abs(zy - tick * (zu @ h)))
            record(k + 1, snap.u)
            jumps(k + 1)

        if max_sub > 1:
            logger.info(f"迎风输运使用了 CFL 子步，最多 {max_sub} 个")
        return SlowMonteCarloResult(
            path_ids=ids,
            record_times=steps * self.dt,
            ZB=rec_zb,
            ZY=rec_zy,
            pairings={n: rec_pair[:, :, j] for j, n in enumerate(names)},
            volterra_pairings={n: rec_volt[:, :, j] for j, n in enumerate(names)} if check else {},
            zy_gap=gap,
            coarsenings=history.coarsenings if history is not None else 0,
            max_substeps=max_sub,
            terminal_zu=zu.copy() if keep_terminal else None,
        )
