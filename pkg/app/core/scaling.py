"""
尺度参数

Δv = Δt, Δx = Δt^α, Δp = Δt^β，T_n = floor(T/Δt)。
"""

import math
from dataclasses import dataclass
from enum import Enum

from app.core.exceptions import ConfigurationError

# α、β 关系比较的容差
REGIME_TOL = 1e-12


class Regime(str, Enum):
    FAST = "fast"
    SLOW = "slow"
    FIRST_ORDER_ONLY = "first-order"


@dataclass(frozen=True)
class ScalingRegime:
    """
    一组尺度参数

    Args:
        dt: 事件时间步 Δt
        alpha: Δx = Δt^α 的指数
        beta: Δp = Δt^β 的指数，须 β ≥ 1-α
        horizon: 时间区间长度 T
        regime: fast / slow / first-order
    """

    dt: float
    alpha: float
    beta: float
    horizon: float = 1.0
    regime: Regime = Regime.FIRST_ORDER_ONLY

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        errors = []
        if not self.dt > 0:
            errors.append(("scaling.dt", "Δt 必须为正"))
        if not 0.0 < self.alpha < 1.0:
            errors.append(("scaling.alpha", "α 必须在 (0,1) 内"))
        if self.beta < 1.0 - self.alpha - REGIME_TOL:
            errors.append(("scaling.beta", "β 必须不小于 1-α"))
        if not self.horizon > 0:
            errors.append(("scaling.horizon", "T 必须为正"))
        elif self.dt > 0 and math.floor(self.horizon / self.dt + 1e-9) < 1:
            errors.append(("scaling.dt", "T_n = floor(T/Δt) 必须 ≥ 1"))

        if self.regime is Regime.FAST:
            if not 0.5 < self.alpha < 1.0:
                errors.append(("scaling.alpha", "fast 区间要求 α ∈ (1/2, 1)"))
            if abs(self.beta - 2.0 * (1.0 - self.alpha)) > REGIME_TOL:
                errors.append(("scaling.beta", "fast 区间要求 β = 2(1-α)"))
        elif self.regime is Regime.SLOW:
            if not 0.0 < self.alpha < 0.5:
                errors.append(("scaling.alpha", "slow 区间要求 α ∈ (0, 1/2)"))
            if abs(self.beta - (1.0 - self.alpha)) > REGIME_TOL:
                errors.append(("scaling.beta", "slow 区间要求 β = 1-α"))

        if errors:
            raise ConfigurationError(
                "scaling 参数不合法",
                {"fields": [{"loc": loc, "msg": msg} for loc, msg in errors]},
            )

    @property
    def dv(self) -> float:
        return self.dt

    @property
    def dx(self) -> float:
        return self.dt ** self.alpha

    @property
    def dp(self) -> float:
        return self.dt ** self.beta

    @property
    def n_events(self) -> int:
        # 加 1e-9 防止 1/1e-3 这类浮点误差少算一步
        return int(math.floor(self.horizon / self.dt + 1e-9))

    @property
    def price_moves(self) -> bool:
        """一阶极限中价格是否运动，即 1_{β=1-α}"""
        return abs(self.beta - (1.0 - self.alpha)) <= REGIME_TOL

    @property
    def rescale(self) -> float:
        """二阶涨落的归一化量 Δ^(n)：fast 用 Δt，slow 用 Δx"""
        if self.regime is Regime.FAST:
            return self.dt
        if self.regime is Regime.SLOW:
            return self.dx
        raise ConfigurationError(
            "first-order 区间没有二阶归一化",
            {"fields": [{"loc": "scaling.regime", "msg": "需要 fast 或 slow"}]},
        )

    def with_dt(self, dt: float) -> "ScalingRegime":
        return ScalingRegime(dt=dt, alpha=self.alpha, beta=self.beta, horizon=self.horizon, regime=self.regime)

    def time_of(self, k: int) -> float:
        return k * self.dt
