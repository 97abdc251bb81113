"""
中心极限定理的经验检验

从离散模拟中抽出重标度的涨落
    Z^B_n(t) = (B^(n)(t) - B_t) / √Δ,   Δ = Δt (fast) 或 Δx (slow)
与极限侧蒙特卡洛样本做边际分布比较（两样本 KS + 矩比较）。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from app.core.builtin_models import build_model, model_factory
from app.core.exceptions import GridMismatchError, InsufficientSampleError
from app.core.grid import Grid, GridFunction, InterpolationOrder
from app.core.model import ModelSpec
from app.core.scaling import Regime, ScalingRegime
from app.schema.report import KsResult, LatticeReport, LevelRow, MarginalReport, MomentComparison
from app.schema.run_config import ModelConfig, ScalingConfig
from app.service.fom_solver import LimitPath, solve_first_order
from app.service.simulator import BookSimulator, DiscretePathBatch

logger = logging.getLogger(__name__)

MIN_PATHS = 500


@dataclass
class FluctuationSample:
    """一批离散路径的涨落序列（第一维为路径，已剔除中止路径）"""
    path_ids: np.ndarray
    regime: ScalingRegime
    times: np.ndarray
    ZB: np.ndarray
    ZY: np.ndarray
    pairings: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.path_ids.size)

    def column(self, t: float) -> int:
        """最接近 t 的记录时刻下标"""
        return int(np.argmin(np.abs(self.times - t)))

    def marginals(self, t: float) -> Dict[str, np.ndarray]:
        j = self.column(t)
        out = {"ZB": self.ZB[:, j], "ZY": self.ZY[:, j]}
        out.update({name: arr[:, j] for name, arr in self.pairings.items()})
        return out


def _check_regime(sample_regime: ScalingRegime, regime: ScalingRegime) -> None:
    same = (
        sample_regime.regime == regime.regime
        and math.isclose(sample_regime.alpha, regime.alpha, abs_tol=1e-12)
        and math.isclose(sample_regime.beta, regime.beta, abs_tol=1e-12)
        and math.isclose(sample_regime.horizon, regime.horizon, abs_tol=1e-12)
    )
    if not same:
        raise GridMismatchError(
            "样本与极限的尺度区间不一致",
            {"sample": sample_regime.regime.value, "limit": regime.regime.value},
        )


def extract_fluctuations(
    batch: DiscretePathBatch,
    limit_path: LimitPath,
    regime: ScalingRegime,
    test_functions: Optional[Mapping[str, GridFunction]] = None,
) -> FluctuationSample:
    """
    在快照时刻抽取涨落

    离散过程在事件之间取左端常数（càdlàg）；配对用与极限侧相同的网格积分。

    Raises:
        GridMismatchError: 区间或网格不一致
    """
    _check_regime(batch.regime, regime)
    if batch.grid is not None:
        batch.grid.check_same(limit_path.grid)
    if abs(limit_path.horizon - regime.horizon) > 1e-9:
        raise GridMismatchError("极限路径时间范围不一致", {"limit": limit_path.horizon, "T": regime.horizon})

    keep = ~batch.aborted
    scale = math.sqrt(regime.rescale)
    steps = batch.snapshot_steps
    times = batch.times[steps]
    b_lim = limit_path.B_at(times)
    y_lim = limit_path.Y_at(times)
    zb = (batch.B[keep][:, steps] - b_lim) / scale
    zy = (batch.Y[keep][:, steps] - y_lim) / scale

    pairings = {}
    tests = dict(test_functions or {})
    for name, arr in batch.pairings.items():
        if name not in tests:
            continue
        limit_pair = np.array([float(limit_path.grid.tick * np.dot(limit_path.state_at(float(t)).u.values, tests[name].values))
                               for t in times])
        pairings[name] = (arr[keep] - limit_pair) / scale
    return FluctuationSample(
        path_ids=batch.path_ids[keep],
        regime=regime,
        times=times,
        ZB=zb,
        ZY=zy,
        pairings=pairings,
    )


def interpolation_variation(limit_path: LimitPath, regime: ScalingRegime) -> float:
    """
    单个事件区间内涨落序列的最大变化

    离散过程在区间内为常数，变化全部来自极限路径，量级 Δt/√Δ。
    """
    times = np.arange(regime.n_events + 1) * regime.dt
    times = times[times <= limit_path.horizon + 1e-12]
    scale = math.sqrt(regime.rescale)
    db = np.abs(np.diff(limit_path.B_at(times)))
    dy = np.abs(np.diff(limit_path.Y_at(times)))
    if db.size == 0:
        return 0.0
    return float(max(db.max(), dy.max()) / scale)


# ====== 统计检验 ======

def ks_critical_value(n: int, m: int, level: float = 0.05) -> float:
    """两样本 KS 的渐近临界值 c(α)·√((n+m)/(nm))，c(α) = √(-ln(α/2)/2)"""
    return math.sqrt(-math.log(level / 2.0) / 2.0) * math.sqrt((n + m) / (n * m))


def lattice_preflight(limit_samples: np.ndarray, spacing: float, n: int, m: int, level: float = 0.05) -> LatticeReport:
    """
    Z^B_n 取值在间距为 spacing 的格点上；换算到 CDF 单位后须小于 KS 临界距离的 1/4

    极限密度上界用正态近似 1/(√(2π)·s)。
    """
    s = float(np.std(limit_samples, ddof=1)) if limit_samples.size > 1 else 0.0
    pdf_max = 1.0 / (math.sqrt(2.0 * math.pi) * s) if s > 0 else math.inf
    cdf_spacing = spacing * pdf_max if spacing > 0 else 0.0
    critical = ks_critical_value(n, m, level)
    return LatticeReport(spacing=spacing, cdf_spacing=cdf_spacing, critical=critical,
                         passed=bool(cdf_spacing < critical / 4.0))


def snap_to_lattice(samples: np.ndarray, spacing: float, offset: float = 0.0) -> np.ndarray:
    """把极限样本对齐到 offset + k·spacing 格点"""
    if spacing <= 0:
        return samples
    return offset + np.round((samples - offset) / spacing) * spacing


def ks_compare(name: str, a: np.ndarray, b: np.ndarray, level: float = 0.05, lattice_matched: bool = False) -> KsResult:
    res = stats.ks_2samp(a, b)
    return KsResult(
        name=name,
        statistic=float(res.statistic),
        pvalue=float(res.pvalue),
        critical=ks_critical_value(a.size, b.size, level),
        level=level,
        n=int(a.size),
        m=int(b.size),
        lattice_matched=lattice_matched,
    )


def _var_se(x: np.ndarray) -> float:
    c = x - x.mean()
    s2 = float(np.mean(c ** 2))
    m4 = float(np.mean(c ** 4))
    return math.sqrt(max(m4 - s2 * s2, 0.0) / x.size)


def _cov_se(x: np.ndarray, y: np.ndarray) -> float:
    cx, cy = x - x.mean(), y - y.mean()
    cov = float(np.mean(cx * cy))
    return math.sqrt(max(float(np.mean((cx * cy) ** 2)) - cov * cov, 0.0) / x.size)


def _z(diff: float, se: float) -> float:
    # 0/0 := 0
    if se > 0:
        return diff / se
    return 0.0 if abs(diff) <= 1e-12 else math.copysign(math.inf, diff)


def compare_moments(name: str, a: np.ndarray, b: np.ndarray, zb_a: np.ndarray, zb_b: np.ndarray,
                    threshold: float = 4.0) -> MomentComparison:
    mean_se = math.sqrt(np.var(a, ddof=1) / a.size + np.var(b, ddof=1) / b.size)
    var_a, var_b = float(np.var(a)), float(np.var(b))
    var_se = math.hypot(_var_se(a), _var_se(b))
    cov_a = float(np.mean((a - a.mean()) * (zb_a - zb_a.mean())))
    cov_b = float(np.mean((b - b.mean()) * (zb_b - zb_b.mean())))
    cov_se = math.hypot(_cov_se(a, zb_a), _cov_se(b, zb_b))
    return MomentComparison(
        name=name,
        mean_discrete=float(a.mean()),
        mean_limit=float(b.mean()),
        mean_z=_z(float(a.mean() - b.mean()), mean_se),
        var_discrete=var_a,
        var_limit=var_b,
        var_z=_z(var_a - var_b, var_se),
        cov_discrete=cov_a,
        cov_limit=cov_b,
        cov_z=_z(cov_a - cov_b, cov_se),
        threshold=threshold,
    )


def compare_marginals(
    discrete: Mapping[str, np.ndarray],
    limit: Mapping[str, np.ndarray],
    t: float,
    level: float = 0.05,
    min_paths: int = MIN_PATHS,
    zb_lattice: Optional[float] = None,
    zb_offset: float = 0.0,
) -> MarginalReport:
    """
    固定时刻的边际比较：Z^B、Z^Y 做两样本 KS，其余配对做矩比较

    Args:
        discrete / limit: 名字 → 样本，必须含 "ZB"
        zb_lattice: Z^B_n 的格点间距；预检不通过时把极限样本对齐到格点再比较
        zb_offset: 格点偏移 (B0 - B_t)/√Δ

    Raises:
        InsufficientSampleError: 任一侧样本少于 min_paths
    """
    n = int(np.asarray(discrete["ZB"]).size)
    m = int(np.asarray(limit["ZB"]).size)
    if n < min_paths or m < min_paths:
        raise InsufficientSampleError(
            f"边际比较每侧至少需要 {min_paths} 条路径",
            {"discrete": n, "limit": m, "required": min_paths},
        )
    zb_d = np.asarray(discrete["ZB"], dtype=float)
    zb_l = np.asarray(limit["ZB"], dtype=float)

    lattice = None
    matched = False
    if zb_lattice:
        lattice = lattice_preflight(zb_l, zb_lattice, n, m, level)
        if not lattice.passed:
            logger.warning(f"tick 格点间距 {lattice.cdf_spacing:.4g} 超过 KS 分辨率的 1/4，极限样本对齐到格点后比较")
            zb_l = snap_to_lattice(zb_l, zb_lattice, zb_offset)
            matched = True

    ks = [ks_compare("ZB", zb_d, zb_l, level, lattice_matched=matched)]
    if "ZY" in discrete and "ZY" in limit:
        ks.append(ks_compare("ZY", np.asarray(discrete["ZY"], dtype=float), np.asarray(limit["ZY"], dtype=float), level))
    moments = [
        compare_moments(name, np.asarray(discrete[name], dtype=float), np.asarray(limit[name], dtype=float),
                        np.asarray(discrete["ZB"], dtype=float), np.asarray(limit["ZB"], dtype=float))
        for name in discrete
        if name not in ("ZB", "ZY") and name in limit
    ]
    return MarginalReport(t=t, ks=ks, moments=moments, lattice=lattice)


# ====== 收敛扫描 ======

def sup_deviation(batch: DiscretePathBatch, limit_path: LimitPath) -> pd.DataFrame:
    """每条未中止路径的 sup_t |B^(n) - B| 与 sup_t |Y^(n) - Y|（全分辨率）"""
    keep = ~batch.aborted
    b_lim = limit_path.B_at(batch.times)
    y_lim = limit_path.Y_at(batch.times)
    return pd.DataFrame({
        "path_id": batch.path_ids[keep],
        "sup_b": np.max(np.abs(batch.B[keep] - b_lim), axis=1),
        "sup_y": np.max(np.abs(batch.Y[keep] - y_lim), axis=1),
    })


def is_decreasing(values: Iterable[float], strict: bool = True) -> bool:
    arr = np.asarray(list(values), dtype=float)
    diffs = np.diff(arr)
    return bool(np.all(diffs < 0)) if strict else bool(np.all(diffs <= 0))


Simulate = Callable[[ModelSpec, ScalingRegime, Sequence[int]], DiscretePathBatch]


def _simulate_inline(spec: ModelSpec, regime: ScalingRegime, path_ids: Sequence[int], seed: int = 0) -> DiscretePathBatch:
    return BookSimulator(spec, regime).run(seed, path_ids)


def convergence_sweep(
    model_config: ModelConfig,
    scaling: ScalingConfig,
    dt_levels: Sequence[float],
    n_paths: int,
    master_seed: int,
    solver_dt: float,
    simulate: Optional[Simulate] = None,
    limit_marginals: Optional[Mapping[str, np.ndarray]] = None,
    half_width: Optional[float] = None,
    on_level: Optional[Callable[[ModelSpec, ScalingRegime, LimitPath, DiscretePathBatch], None]] = None,
    interpolation: InterpolationOrder = InterpolationOrder.LINEAR,
) -> List[LevelRow]:
    """
    逐层模拟并与一阶极限比较

    每层在自己的网格（tick = Δx）上求一阶极限；给出 limit_marginals 时
    同时计算 Z^B(T)、Z^Y(T) 与极限样本的 KS 距离。

    Args:
        simulate: (spec, regime, path_ids) → DiscretePathBatch，缺省在本进程内模拟
        half_width: 截断窗口半宽，缺省由模型推出
        on_level: 每层完成后的回调（额外诊断、产物输出）
    """
    rows = []
    for dt in dt_levels:
        regime = scaling.to_regime(dt)
        spec = build_model(model_config, regime, model_factory.grid_for(model_config, regime, half_width=half_width))
        limit = solve_first_order(spec, regime, min(solver_dt, regime.horizon), interpolation=interpolation)
        path_ids = list(range(n_paths))
        if simulate is None:
            batch = _simulate_inline(spec, regime, path_ids, master_seed)
        else:
            batch = simulate(spec, regime, path_ids)
        dev = sup_deviation(batch, limit)
        row = LevelRow(
            dt=dt,
            dx=regime.dx,
            paths=int(dev.shape[0]),
            aborted=int(batch.aborted.sum()),
            median_sup_b=float(dev["sup_b"].median()) if len(dev) else 0.0,
            median_sup_y=float(dev["sup_y"].median()) if len(dev) else 0.0,
            lost_mass=float(batch.lost_mass.mean()) if batch.size else 0.0,
            y_drift=float(batch.y_drift.max()) if batch.size else 0.0,
        )
        if limit_marginals is not None and regime.regime is not Regime.FIRST_ORDER_ONLY:
            sample = extract_fluctuations(batch, limit, regime)
            j = sample.column(regime.horizon)
            row.ks_zb = float(stats.ks_2samp(sample.ZB[:, j], limit_marginals["ZB"]).statistic)
            if "ZY" in limit_marginals:
                row.ks_zy = float(stats.ks_2samp(sample.ZY[:, j], limit_marginals["ZY"]).statistic)
        if on_level is not None:
            on_level(spec, regime, limit, batch)
        logger.info(f"dt={dt:g} 完成: paths={row.paths}, median sup|B|={row.median_sup_b:.4g}, median sup|Y|={row.median_sup_y:.4g}")
        rows.append(row)
    return rows


def levels_frame(rows: Sequence[LevelRow]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in rows])


def limit_sample(result, column: int) -> Dict[str, np.ndarray]:
    """极限侧蒙特卡洛结果（fast 或 slow）在第 column 个记录时刻的边际样本"""
    out = {"ZB": result.ZB[:, column], "ZY": result.ZY[:, column]}
    out.update({name: arr[:, column] for name, arr in result.pairings.items()})
    return out


def marginals_frame(reports: Sequence[MarginalReport]) -> pd.DataFrame:
    """边际比较结果展开成表：每个 (t, 量) 一行"""
    records = []
    for rep in reports:
        for ks in rep.ks:
            records.append({"t": rep.t, "name": ks.name, "kind": "ks", "statistic": ks.statistic,
                            "threshold": ks.critical, "passed": ks.passed})
        for mom in rep.moments:
            records.append({"t": rep.t, "name": mom.name, "kind": "moments",
                            "statistic": max(abs(mom.mean_z), abs(mom.var_z), abs(mom.cov_z)),
                            "threshold": mom.threshold, "passed": mom.passed})
    return pd.DataFrame(records, columns=["t", "name", "kind", "statistic", "threshold", "passed"])


# ====== 逐路径输出 ======

def cells_frame(grid: Grid, values: np.ndarray, keys: Mapping[str, np.ndarray], column: str = "u") -> pd.DataFrame:
    """
    (行 × 格子) 的网格值展开成长表，只保留非零格子

    Args:
        values: 形状 (rows, n_cells)
        keys: 每行的标识列（path_id、k、t ...），长度均为 rows
    """
    values = np.asarray(values, dtype=float).reshape(-1, grid.n_cells)
    rows, cells = np.nonzero(values)
    frame = pd.DataFrame({name: np.asarray(col)[rows] for name, col in keys.items()})
    frame["x"] = grid.right_edges[cells]
    frame[column] = values[rows, cells]
    return frame


def discrete_series_frame(batch: DiscretePathBatch) -> pd.DataFrame:
    """快照步上的 (path_id, k, t_k, B, Y)，按 stride 抽稀"""
    steps = batch.snapshot_steps
    m, s = batch.size, steps.size
    return pd.DataFrame({
        "path_id": np.repeat(batch.path_ids, s),
        "k": np.tile(steps, m),
        "t": np.tile(batch.times[steps], m),
        "B": batch.B[:, steps].ravel(),
        "Y": batch.Y[:, steps].ravel(),
        "aborted": np.repeat(batch.aborted, s),
    })


def discrete_snapshot_frame(batch: DiscretePathBatch) -> pd.DataFrame:
    """相对坐标 u 快照；模拟时须 keep_snapshots"""
    if batch.snapshots is None:
        raise ValueError("模拟时没有保存 u 快照")
    steps = batch.snapshot_steps
    m, s = batch.size, steps.size
    keys = {"path_id": np.repeat(batch.path_ids, s), "k": np.tile(steps, m), "t": np.tile(batch.times[steps], m)}
    return cells_frame(batch.grid, batch.snapshots, keys)


def limit_snapshot_frame(path: LimitPath, count: int) -> pd.DataFrame:
    """一阶极限在 count+1 个等距存储时刻上的相对坐标 u"""
    idx = np.unique(np.round(np.linspace(0, path.times.size - 1, max(count, 1) + 1)).astype(np.int64))
    values = np.stack([path.u_at_index(int(i)).values for i in idx])
    return cells_frame(path.grid, values, {"t": path.times[idx]})


def fluctuation_series_frame(result) -> pd.DataFrame:
    """极限侧（fast 或 slow）逐路径 (t, ZB, ZY)"""
    m, s = result.ZB.shape
    return pd.DataFrame({
        "path_id": np.repeat(result.path_ids, s),
        "t": np.tile(result.record_times, m),
        "ZB": result.ZB.ravel(),
        "ZY": result.ZY.ravel(),
    })


def terminal_zu_frame(result, grid: Grid) -> pd.DataFrame:
    """终端 Z^u 快照；积分时须 keep_terminal"""
    if result.terminal_zu is None:
        raise ValueError("积分时没有保留终端 Z^u")
    return cells_frame(grid, result.terminal_zu, {"path_id": result.path_ids}, column="Zu")
