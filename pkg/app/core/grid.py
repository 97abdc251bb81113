"""
网格与网格函数

价格轴按 tick 离散，第 j 个格子覆盖 (x_{j-1}, x_j]，x_j = j·tick。
网格函数在每个格子上取常数（càglàd 阶梯函数），内积对阶梯函数是精确的。
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, Tuple

import numpy as np

from app.core.exceptions import GridMismatchError, NumericError


class ShiftDirection(str, Enum):
    """平移方向：PLUS 对应 T_+ u(x)=u(x+Δx)，MINUS 对应 T_- u(x)=u(x-Δx)"""
    PLUS = "plus"
    MINUS = "minus"


class InterpolationOrder(str, Enum):
    LINEAR = "linear"
    CUBIC = "cubic"


@dataclass(frozen=True)
class Grid:
    """
    截断窗口 [-L, L] 上的等距网格

    Args:
        tick: 格子宽度 Δx
        lo_index: 最左格子编号（< 0）
        hi_index: 最右格子编号（> 0）
    """

    tick: float
    lo_index: int
    hi_index: int

    def __post_init__(self):
        if not self.tick > 0:
            raise GridMismatchError("tick 必须为正", {"tick": self.tick})
        if not self.lo_index < 0 < self.hi_index:
            raise GridMismatchError(
                "网格编号必须满足 lo_index < 0 < hi_index",
                {"lo_index": self.lo_index, "hi_index": self.hi_index},
            )

    @classmethod
    def symmetric(cls, tick: float, half_width: float) -> "Grid":
        """按半宽 L 构造对称网格，至少包含 1 个正、负格子"""
        cells = max(1, int(math.ceil(half_width / tick - 1e-9)))
        return cls(tick=tick, lo_index=-cells, hi_index=cells)

    @property
    def n_cells(self) -> int:
        return self.hi_index - self.lo_index + 1

    @property
    def half_width(self) -> float:
        """截断界 L"""
        return max(abs(self.lo_index), self.hi_index) * self.tick

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.lo_index, self.hi_index + 1)

    @property
    def right_edges(self) -> np.ndarray:
        # 格子右端点 x_j
        return self.indices * self.tick

    @property
    def left_edges(self) -> np.ndarray:
        return (self.indices - 1) * self.tick

    def position(self, j: int) -> int:
        """格子编号 j 在数组中的下标"""
        return j - self.lo_index

    def cell_of(self, x):
        """包含 x 的格子编号 ceil(x/Δx)，支持数组"""
        return np.ceil(np.asarray(x) / self.tick).astype(np.int64)

    def zeros(self) -> "GridFunction":
        return GridFunction(self, np.zeros(self.n_cells))

    def check_same(self, other: "Grid") -> None:
        if self != other:
            raise GridMismatchError(
                "网格不一致",
                {"left": (self.tick, self.lo_index, self.hi_index), "right": (other.tick, other.lo_index, other.hi_index)},
            )


@dataclass
class GridFunction:
    """网格上的阶梯函数，values[i] 是第 lo_index+i 个格子上的取值"""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_cells,):
            raise GridMismatchError(
                "取值数组长度与网格不符",
                {"expected": self.grid.n_cells, "got": list(self.values.shape)},
            )
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0]) + self.grid.lo_index
            raise NumericError("网格函数含非有限值", {"cell": bad})

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy())

    def integral(self) -> float:
        return integrate(self)

    def derivative(self) -> "GridFunction":
        return derivative(self)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self.grid.check_same(other.grid)
        return GridFunction(self.grid, self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self.grid.check_same(other.grid)
        return GridFunction(self.grid, self.values - other.values)

    def __mul__(self, scalar: float) -> "GridFunction":
        return GridFunction(self.grid, self.values * float(scalar))

    __rmul__ = __mul__


def inner_product(a: GridFunction, b: GridFunction) -> float:
    """
    ⟨a, b⟩ = tick·Σ a_j b_j，对阶梯函数精确

    Raises:
        GridMismatchError: 网格不同
    """
    a.grid.check_same(b.grid)
    return float(a.grid.tick * np.dot(a.values, b.values))


def integrate(a: GridFunction) -> float:
    return float(a.grid.tick * a.values.sum())


def derivative(a: GridFunction) -> GridFunction:
    """中心差分，边界处一阶单侧差分"""
    if a.grid.n_cells < 2:
        return a.grid.zeros()
    return GridFunction(a.grid, np.gradient(a.values, a.grid.tick))


def shift_values(values: np.ndarray, direction: ShiftDirection) -> Tuple[np.ndarray, np.ndarray]:
    """
    沿最后一维整格平移，返回 (平移后数组, 移出窗口的格子值)

    支持批量数组 (paths, cells)。
    """
    out = np.zeros_like(values)
    if ShiftDirection(direction) is ShiftDirection.PLUS:
        # T_+ u(x) = u(x + Δx)：新第 j 格取旧第 j+1 格，最左格移出
        out[..., :-1] = values[..., 1:]
        lost = values[..., 0].copy()
    else:
        out[..., 1:] = values[..., :-1]
        lost = values[..., -1].copy()
    return out, lost


def shift(u: GridFunction, direction: ShiftDirection) -> GridFunction:
    """精确的一格平移，从窗口外移入的格子为 0"""
    values, _ = shift_values(u.values, direction)
    return GridFunction(u.grid, values)


def _roll_zero(values: np.ndarray, k: int) -> np.ndarray:
    # out[j] = values[j - k]，越界补 0
    out = np.zeros_like(values)
    n = values.shape[-1]
    if k >= n or k <= -n:
        return out
    if k > 0:
        out[..., k:] = values[..., :-k]
    elif k < 0:
        out[..., :k] = values[..., -k:]
    else:
        out[...] = values
    return out


def shift_array(values: np.ndarray, cells: float) -> np.ndarray:
    """
    非整格平移：out(x) = values(x - cells·tick)，格间线性插值

    整数 cells 时结果是精确的下标平移。
    """
    k = int(math.floor(cells))
    w = cells - k
    if w == 0.0:
        return _roll_zero(values, k)
    return (1.0 - w) * _roll_zero(values, k) + w * _roll_zero(values, k + 1)


def shift_by(u: GridFunction, distance: float, order: InterpolationOrder = InterpolationOrder.LINEAR) -> GridFunction:
    """
    按实数距离平移：结果在 x 处取 u(x - distance)

    Args:
        u: 网格函数
        distance: 平移距离（价格单位）
        order: linear 或 cubic 插值
    """
    cells = distance / u.grid.tick
    if InterpolationOrder(order) is InterpolationOrder.LINEAR or float(cells).is_integer():
        return GridFunction(u.grid, shift_array(u.values, cells))

    from scipy.interpolate import CubicSpline

    idx = np.arange(u.grid.n_cells, dtype=float)
    spline = CubicSpline(idx, u.values, bc_type="natural", extrapolate=False)
    out = spline(idx - cells)
    return GridFunction(u.grid, np.nan_to_num(out, nan=0.0))


def project_to_grid(
    smooth: Callable,
    grid: Grid,
    refine: int = 4,
    offset: float = 0.0,
) -> GridFunction:
    """
    把光滑函数投影成格子平均值（每格 refine 个子区间的中点公式）

    Args:
        smooth: 向量化可调用对象 x -> 值
        grid: 目标网格
        refine: 每格子区间数，至少 3
        offset: 在 x + offset 处取值，用于平移后的投影

    Raises:
        NumericError: 可调用对象返回非有限值
    """
    refine = max(3, int(refine))
    sub = (np.arange(refine) + 0.5) / refine
    points = grid.left_edges[:, None] + sub[None, :] * grid.tick + offset
    raw = np.broadcast_to(np.asarray(smooth(points), dtype=float), points.shape)
    if not np.all(np.isfinite(raw)):
        i, m = np.argwhere(~np.isfinite(raw))[0]
        raise NumericError("投影函数返回非有限值", {"x": float(points[i, m])})
    return GridFunction(grid, raw.mean(axis=1))


def bump_profile(center: float, half_width: float) -> Callable[[np.ndarray], np.ndarray]:
    """紧支撑光滑鼓包 exp(-1/(1-r²))"""

    def profile(x):
        r = (np.asarray(x, dtype=float) - center) / half_width
        inside = np.abs(r) < 1.0
        out = np.zeros_like(r)
        out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
        return out

    return profile


def bump(grid: Grid, center: float, half_width: float) -> GridFunction:
    return project_to_grid(bump_profile(center, half_width), grid)


DEFAULT_BUMP_CENTERS: Tuple[float, ...] = (-4.0, -3.0, -2.0, -1.0, 0.0)


def default_test_functions(
    grid: Grid,
    h: GridFunction,
    centers: Iterable[float] = DEFAULT_BUMP_CENTERS,
    half_width: float = 1.0,
) -> Dict[str, GridFunction]:
    """配对观测用的测试函数族：错开位置的鼓包 + h 本身"""
    family = {f"bump_{c:g}": bump(grid, c, half_width) for c in centers}
    family["h"] = h
    return family
