"""
盘口深度计算

阶梯函数在区间上的积分都是逐格精确的：
  - cell_overlap: 每个格子与 (lo, hi] 的重叠长度
  - depth_for_mass: 从 top 向左走，累计量达到 θ 的最小深度 c
"""

import numpy as np

from app.core.exceptions import InfeasibleTradeError
from app.core.grid import Grid

# 累计量比较的相对容差
MASS_TOL = 1e-13


def cell_overlap(grid: Grid, lo: float, hi: float) -> np.ndarray:
    """各格子 (x_{j-1}, x_j] 与 (lo, hi] 的重叠长度"""
    if hi <= lo:
        return np.zeros(grid.n_cells)
    return np.clip(np.minimum(grid.right_edges, hi) - np.maximum(grid.left_edges, lo), 0.0, None)


def cell_first_moment(grid: Grid, lo: float, hi: float) -> np.ndarray:
    """各格子上 ∫ x dx 在 (lo, hi] 内的部分"""
    if hi <= lo:
        return np.zeros(grid.n_cells)
    a = np.maximum(grid.left_edges, lo)
    b = np.minimum(grid.right_edges, hi)
    return np.where(b > a, 0.5 * (b * b - a * a), 0.0)


def depth_for_mass(values: np.ndarray, grid: Grid, theta: float, top: float = 0.0) -> float:
    """
    求最小 c ≥ 0 使得 ∫_{top-c}^{top} u = θ

    Args:
        values: 网格函数取值
        grid: 网格
        theta: 目标量 θ ≥ 0
        top: 起始位置（相对坐标下为 0）

    Returns:
        深度 c

    Raises:
        InfeasibleTradeError: 可用量不足
    """
    if theta <= 0.0:
        return 0.0
    tick = grid.tick
    top_cell = int(np.ceil(top / tick - 1e-12))
    top_cell = min(top_cell, grid.hi_index)
    if top_cell < grid.lo_index:
        raise InfeasibleTradeError("起始位置在窗口之外", detail={"top": top})
    pos = top_cell - grid.lo_index
    # 从 top 所在格子向左的各段
    seg_values = values[pos::-1]
    first_len = min(top - (top_cell - 1) * tick, tick)
    lengths = np.full(seg_values.shape, tick)
    lengths[0] = first_len
    masses = seg_values * lengths
    cum = np.cumsum(masses)
    hits = np.flatnonzero(cum >= theta * (1.0 - MASS_TOL))
    if hits.size == 0:
        available = float(cum.max()) if cum.size else 0.0
        raise InfeasibleTradeError(
            "成交量超过盘口可用量",
            detail={"theta": theta, "available": available},
        )
    i = int(hits[0])
    before = float(cum[i - 1]) if i > 0 else 0.0
    offset = float(lengths[:i].sum())
    density = float(seg_values[i])
    remaining = theta - before
    # 0/0 := 0
    inside = remaining / density if density != 0.0 else 0.0
    return offset + min(max(inside, 0.0), float(lengths[i]))


def mass_between(values: np.ndarray, grid: Grid, lo: float, hi: float) -> float:
    return float(np.dot(values, cell_overlap(grid, lo, hi)))


def first_moment_between(values: np.ndarray, grid: Grid, lo: float, hi: float) -> float:
    """∫_{lo}^{hi} x u(x) dx"""
    return float(np.dot(values, cell_first_moment(grid, lo, hi)))


def remove_between(values: np.ndarray, grid: Grid, lo: float, hi: float) -> np.ndarray:
    """把 (lo, hi] 上的量删去，部分覆盖的格子按比例减少"""
    keep = 1.0 - cell_overlap(grid, lo, hi) / grid.tick
    return values * np.clip(keep, 0.0, 1.0)
