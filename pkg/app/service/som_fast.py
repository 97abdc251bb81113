"""
fast 区间二阶极限

    dZ^B = μ(Y) dt + σ(Y) dW^B
    dZ^u = [μ ∂_x u + f_b Z^B + f_y Z^Y] dt + σ ∂_x u dW^B + dM

M 是高斯鞅，在格子指示基 e_i = 1_cell/√tick 下协方差为 dt·Q，
Q = diag(g) - tick·f fᵀ（对角减秩一），平方根有闭式：
    S = D^{1/2}(I - c·b bᵀ),  b = D^{-1/2}·√tick·f,  c = 1/(1 + √(1-|b|²))
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import CovarianceError
from app.core.grid import Grid, GridFunction, inner_product
from app.core.model import ModelSpec
from app.core.scaling import ScalingRegime
from app.service.fom_solver import LimitPath, LimitSnapshot
from app.service.simulator import path_rng

logger = logging.getLogger(__name__)

# 懒分解阈值：‖Q(t) - Q(t_last)‖_∞ > REFACTOR_TOL·‖Q‖_∞ 时重新分解
REFACTOR_TOL = 1e-3
PSD_TOL = 1e-10


def drift_vol_price(y: float, spec: ModelSpec) -> Tuple[float, float]:
    """
    价格涨落的漂移与波动率 (p(B0,y), (pA+pB)^{1/2})

    Raises:
        ConfigurationError: 模型没有 pDiff
    """
    mu = spec.drift(spec.B0, y)
    sigma = float(spec.sigma_b(spec.B0, y))
    return mu, sigma


def sigma_phi(phi: GridFunction, y: float, spec: ModelSpec) -> float:
    """σ_φ(y) = ((⟨g, φ²⟩ - ⟨f, φ⟩²) ∨ 0)^{1/2}"""
    g = spec.g(spec.B0, y)
    f = spec.f(spec.B0, y)
    square = GridFunction(phi.grid, phi.values ** 2)
    return math.sqrt(max(inner_product(g, square) - inner_product(f, phi) ** 2, 0.0))


@dataclass
class NoiseKernel:
    """
    噪声协方差 Q 的结构化分解

    Args:
        grid: 网格
        g: 二阶矩密度的格子值
        f: 一阶矩密度的格子值
    """

    grid: Grid
    g: np.ndarray
    f: np.ndarray
    sqrt_d: np.ndarray = field(init=False)
    b: np.ndarray = field(init=False)
    c: float = field(init=False)
    projection_delta: float = field(init=False)
    clamped_cells: np.ndarray = field(init=False)

    def __post_init__(self):
        tick = self.grid.tick
        g = np.asarray(self.g, dtype=float)
        a = math.sqrt(tick) * np.asarray(self.f, dtype=float)
        if np.any(g < -PSD_TOL * max(1.0, float(np.abs(g).max(initial=0.0)))):
            raise CovarianceError("二阶矩密度为负", {"cell": int(np.argmin(g)) + self.grid.lo_index})
        g = np.maximum(g, 0.0)
        self.sqrt_d = np.sqrt(g)
        # 0/0 := 0；g=0 而 f≠0 的格子无法满足方差不等式，计入投影
        b = np.divide(a, self.sqrt_d, out=np.zeros_like(a), where=self.sqrt_d > 0)
        dropped = float(np.sum(a[self.sqrt_d == 0] ** 2))
        self.clamped_cells = np.flatnonzero(g - a * a < 0.0)
        norm_sq = float(np.dot(b, b))
        delta = dropped
        if norm_sq > 1.0:
            # 把 b 缩放到单位长度：Q 的变化为 (1 - 1/|b|²)·a aᵀ
            delta += (1.0 - 1.0 / norm_sq) * float(np.dot(a, a))
            b = b / math.sqrt(norm_sq)
            norm_sq = 1.0
        self.b = b
        self.c = 1.0 / (1.0 + math.sqrt(max(1.0 - norm_sq, 0.0)))
        self.projection_delta = delta
        if not np.all(np.isfinite(self.b)) or not math.isfinite(self.c):
            raise CovarianceError("噪声协方差分解失败", {"norm_sq": norm_sq})

    @classmethod
    def at(cls, spec: ModelSpec, y: float, b: Optional[float] = None) -> "NoiseKernel":
        b = spec.B0 if b is None else b
        return cls(spec.grid, spec.g(b, y).values, spec.f(b, y).values)

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.g)) + self.grid.tick * np.max(np.abs(self.f)) ** 2) if self.g.size else 0.0

    def diagonal(self) -> np.ndarray:
        """σ_{e_i}² = (g_i - tick·f_i²) ∨ 0"""
        return np.maximum(self.g - self.grid.tick * self.f ** 2, 0.0)

    def dense(self) -> np.ndarray:
        """投影后的 Q（仅用于小网格诊断）"""
        s = self.sqrt_factor()
        return s @ s.T

    def raw_dense(self) -> np.ndarray:
        return np.diag(self.g) - self.grid.tick * np.outer(self.f, self.f)

    def sqrt_factor(self) -> np.ndarray:
        return self.sqrt_d[:, None] * (np.eye(self.b.size) - self.c * np.outer(self.b, self.b))

    def sample(self, z: np.ndarray) -> np.ndarray:
        """z 为标准正态（最后一维为格子），返回协方差为 Q 的系数 ξ = S z"""
        proj = z @ self.b
        return self.sqrt_d * (z - self.c * np.multiply.outer(proj, self.b))

    def distance(self, other: "NoiseKernel") -> float:
        """‖Q - Q_other‖_∞ 的上界"""
        dg = float(np.max(np.abs(self.g - other.g)))
        df = float(np.max(np.abs(self.f - other.f)))
        scale = float(np.max(np.abs(self.f)) + np.max(np.abs(other.f)))
        return dg + self.grid.tick * scale * df


@dataclass
class FastLimitState:
    ZB: float
    Zu: GridFunction
    ZY: float
    t: float = 0.0

    @classmethod
    def zero(cls, grid: Grid) -> "FastLimitState":
        return cls(ZB=0.0, Zu=grid.zeros(), ZY=0.0, t=0.0)


@dataclass
class _StepCoefficients:
    t: float
    mu: float
    sigma: float
    du: np.ndarray
    fb: np.ndarray
    fy: np.ndarray
    kernel: NoiseKernel
    rate: float  # ⟨h, f_y⟩
    du_h: float  # ⟨∂_x u, h⟩
    fb_h: float  # ⟨f_b, h⟩


def _coefficients(spec: ModelSpec, snap: LimitSnapshot, kernel: NoiseKernel) -> _StepCoefficients:
    mu, sigma = drift_vol_price(snap.Y, spec)
    fb = spec.fb(spec.B0, snap.Y)
    fy = spec.fy(spec.B0, snap.Y)
    h = spec.h
    return _StepCoefficients(
        t=snap.t,
        mu=mu,
        sigma=sigma,
        du=snap.du.values,
        fb=fb.values,
        fy=fy.values,
        kernel=kernel,
        rate=inner_product(h, fy),
        du_h=inner_product(snap.du, h),
        fb_h=inner_product(fb, h),
    )


def step_fast(
    state: FastLimitState,
    snap: LimitSnapshot,
    spec: ModelSpec,
    dt_sde: float,
    rng: np.random.Generator,
    kernel: Optional[NoiseKernel] = None,
) -> FastLimitState:
    """单条路径的一步 Euler-Maruyama"""
    kernel = kernel or NoiseKernel.at(spec, snap.Y)
    coeffs = _coefficients(spec, snap, kernel)
    normals = rng.standard_normal(1 + spec.grid.n_cells)
    zb, zu, _, _ = _advance(
        np.array([state.ZB]), state.Zu.values[None, :], coeffs, spec, dt_sde, normals[None, :]
    )
    zu_fn = GridFunction(spec.grid, zu[0])
    return FastLimitState(ZB=float(zb[0]), Zu=zu_fn, ZY=inner_product(zu_fn, spec.h), t=state.t + dt_sde)


def _advance(zb, zu, coeffs: _StepCoefficients, spec: ModelSpec, dt: float, normals: np.ndarray):
    """
    批量推进一步，返回 (ZB, Zu, d⟨D,h⟩, ZY_before)

    normals[:, 0] 驱动 W^B，其余驱动 M。
    """
    tick = spec.grid.tick
    h = spec.h.values
    sqrt_dt = math.sqrt(dt)
    zy = tick * (zu @ h)
    d_zb = coeffs.mu * dt + coeffs.sigma * sqrt_dt * normals[:, 0]
    xi = coeffs.kernel.sample(normals[:, 1:])
    d_m = math.sqrt(dt / tick) * xi
    drive = np.multiply.outer(d_zb, coeffs.du) + np.multiply.outer(zb * dt, coeffs.fb) + d_m
    zu_next = zu + drive + np.multiply.outer(zy * dt, coeffs.fy)
    # d⟨D,h⟩：除 f_y 项以外的全部增量与 h 的配对
    d_drive_h = coeffs.du_h * d_zb + coeffs.fb_h * zb * dt + tick * (d_m @ h)
    return zb + d_zb, zu_next, d_drive_h, zy


def _phi1(z: float) -> float:
    return 1.0 if z == 0.0 else math.expm1(z) / z


def ou_step(zy: np.ndarray, rate: float, d_drive: np.ndarray, dt: float) -> np.ndarray:
    """指数积分一步：ZY ← e^{a dt} ZY + φ1(a dt)·d⟨D,h⟩"""
    z = rate * dt
    return math.exp(z) * zy + _phi1(z) * d_drive


def zy_ou_reference(
    limit_path: LimitPath,
    spec: ModelSpec,
    drive_increments: Sequence[float],
    dt_sde: float,
) -> np.ndarray:
    """
    标量 OU：dZ^Y = d⟨D,h⟩ + Z^Y·⟨h, f_y(B0,Y)⟩ dt

    Args:
        drive_increments: 每步的 d⟨D,h⟩（与网格方程同一组噪声）

    Returns:
        长度为步数+1 的 Z^Y 序列
    """
    increments = np.asarray(drive_increments, dtype=float)
    out = np.zeros(increments.size + 1)
    for k, d in enumerate(increments):
        y = float(limit_path.Y_at(k * dt_sde))
        rate = inner_product(spec.h, spec.fy(spec.B0, y))
        out[k + 1] = ou_step(np.array(out[k]), rate, np.array(d), dt_sde)
    return out


@dataclass
class FastMonteCarloResult:
    """fast 区间极限侧蒙特卡洛结果（第一维为路径）"""
    path_ids: np.ndarray
    record_times: np.ndarray
    ZB: np.ndarray
    ZY: np.ndarray
    ZY_ou: np.ndarray
    pairings: Dict[str, np.ndarray]
    ou_gap: np.ndarray
    refactorizations: int = 0
    projection_delta: float = 0.0
    clamped_cells: int = 0
    terminal_zu: Optional[np.ndarray] = None  # 终端 Z^u 快照（paths × cells），按需保存


class FastFluctuationSolver:
    """
    fast 区间二阶极限的批量积分器

    Args:
        spec: 模型（网格取 spec.grid，须与 limit_path 一致）
        regime: fast 区间尺度参数
        limit_path: 一阶极限（B ≡ B0）
        dt_sde: 时间步长
        substeps: 每步由多少个细步的噪声合成（不同步长之间共享布朗路径）
    """

    def __init__(
        self,
        spec: ModelSpec,
        regime: ScalingRegime,
        limit_path: LimitPath,
        dt_sde: float,
        substeps: int = 1,
    ):
        spec.grid.check_same(limit_path.grid)
        self.spec = spec
        self.regime = regime
        self.limit_path = limit_path
        self.n_steps = max(1, int(round(regime.horizon / dt_sde)))
        self.dt = regime.horizon / self.n_steps
        self.substeps = max(1, int(substeps))
        self._kernel: Optional[NoiseKernel] = None
        self.refactorizations = 0
        self.projection_delta = 0.0
        self.clamped_cells = 0

    def kernel_for(self, y: float) -> NoiseKernel:
        """懒分解：Q 变化不超过阈值时复用上一次的分解"""
        candidate = NoiseKernel.at(self.spec, y)
        current = self._kernel
        if current is None or current.distance(candidate) > REFACTOR_TOL * max(candidate.sup_norm, 1e-300):
            self._kernel = candidate
            self.refactorizations += 1
            self.projection_delta = max(self.projection_delta, candidate.projection_delta)
            if candidate.clamped_cells.size:
                self.clamped_cells = max(self.clamped_cells, int(candidate.clamped_cells.size))
                logger.warning(f"σ_φ 截断：{candidate.clamped_cells.size} 个格子方差为负 (Y={y:.4g})")
        return self._kernel

    def _draw(self, rngs: List[np.random.Generator]) -> np.ndarray:
        width = 1 + self.spec.grid.n_cells
        r = self.substeps
        rows = [rng.standard_normal((r, width)).sum(axis=0) for rng in rngs]
        return np.stack(rows) / math.sqrt(r)

    def record_steps(self, record_times: Sequence[float]) -> np.ndarray:
        return np.clip(np.round(np.asarray(record_times, dtype=float) / self.dt).astype(np.int64), 0, self.n_steps)

    def run(
        self,
        master_seed: int,
        path_ids: Sequence[int],
        record_times: Sequence[float],
        test_functions: Optional[Mapping[str, GridFunction]] = None,
        stream: int = 1,
        zb0: float = 0.0,
        keep_terminal: bool = False,
    ) -> FastMonteCarloResult:
        """积分一批路径，在 record_times（取最近步）记录 Z^B、Z^Y 与配对；keep_terminal 时保留终端 Z^u"""
        spec = self.spec
        grid = spec.grid
        ids = np.asarray(list(path_ids), dtype=np.int64)
        m = ids.size
        rngs = [path_rng(master_seed, int(i), stream) for i in ids]
        steps = self.record_steps(record_times)
        names = list(test_functions or {})
        phi = (np.stack([test_functions[n].values for n in names], axis=1) if names else np.zeros((grid.n_cells, 0)))

        zb = np.full(m, float(zb0))
        zu = np.zeros((m, grid.n_cells))
        zy_ou = np.zeros(m)
        gap = np.zeros(m)
        rec_zb = np.zeros((m, steps.size))
        rec_zy = np.zeros((m, steps.size))
        rec_ou = np.zeros((m, steps.size))
        rec_pair = np.zeros((m, steps.size, len(names)))

        def record(k: int):
            for r in np.flatnonzero(steps == k):
                rec_zb[:, r] = zb
                rec_zy[:, r] = grid.tick * (zu @ spec.h.values)
                rec_ou[:, r] = zy_ou
                rec_pair[:, r, :] = grid.tick * (zu @ phi)

        record(0)
        for k in range(self.n_steps):
            snap = self.limit_path.state_at(k * self.dt)
            coeffs = _coefficients(spec, snap, self.kernel_for(snap.Y))
            normals = self._draw(rngs)
            zb, zu, d_drive, _ = _advance(zb, zu, coeffs, spec, self.dt, normals)
            zy_ou = ou_step(zy_ou, coeffs.rate, d_drive, self.dt)
            gap = np.maximum(gap, np.abs(grid.tick * (zu @ spec.h.values) - zy_ou))
            record(k + 1)

        return FastMonteCarloResult(
            path_ids=ids,
            record_times=steps * self.dt,
            ZB=rec_zb,
            ZY=rec_zy,
            ZY_ou=rec_ou,
            pairings={n: rec_pair[:, :, j] for j, n in enumerate(names)},
            ou_gap=gap,
            refactorizations=self.refactorizations,
            projection_delta=self.projection_delta,
            clamped_cells=self.clamped_cells,
            terminal_zu=zu.copy() if keep_terminal else None,
        )
