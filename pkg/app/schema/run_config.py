"""运行配置数据模型"""
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from app.core.exceptions import ConfigurationError
from app.core.grid import InterpolationOrder
from app.core.scaling import Regime, ScalingRegime


# ================== scaling 块 ==================
class ScalingConfig(BaseModel):
    """尺度参数"""
    dt: float = Field(default=1e-3, gt=0)  # 事件时间步 Δt
    alpha: float = Field(default=0.4, gt=0, lt=1)  # Δx = Δt^α
    beta: float = Field(default=0.6, gt=0)  # Δp = Δt^β
    horizon: float = Field(default=1.0, gt=0)  # T
    regime: Regime = Regime.SLOW

    def to_regime(self, dt: Optional[float] = None) -> ScalingRegime:
        return ScalingRegime(
            dt=self.dt if dt is None else dt,
            alpha=self.alpha,
            beta=self.beta,
            horizon=self.horizon,
            regime=self.regime,
        )


# ================== grid 块 ==================
class GridConfig(BaseModel):
    """网格参数，缺省由 scaling 和模型推出"""
    tick: Optional[float] = Field(default=None, gt=0)  # 覆盖 Δx
    half_width: Optional[float] = Field(default=None, gt=0)  # 截断界 L
    sde_tick: Optional[float] = Field(default=None, gt=0)  # 极限涨落方程所用网格


# ================== model 块 ==================
class ModelConfig(BaseModel):
    """内置模型及其参数"""
    name: Literal["example-3-10", "example-fast", "constant-test"] = "example-3-10"
    lam: float = Field(default=1.0, gt=0)  # h 中的 λ
    placement_width: float = Field(default=10.0, gt=0)  # π 的支撑半宽
    B0: float = Field(default=1.0, ge=0)  # 初始最优买价
    u0_shape: Literal["quartic", "block", "zero"] = "quartic"
    u0_height: float = Field(default=0.5, ge=0)
    u0_width: float = Field(default=4.0, gt=0)
    drift_split: Literal["upper", "symmetric"] = "upper"  # example-fast 中 p^A/p^B 的拆分方式
    # constant-test 专用
    p_a: float = Field(default=0.0, ge=0)
    p_b: float = Field(default=0.0, ge=0)
    p_diff: Optional[float] = None
    omega: float = 1.0


# ================== experiment 块 ==================
class ExperimentConfig(BaseModel):
    """实验参数"""
    name: Literal["first-order", "fast-clt", "slow-clt", "liquidation"] = "first-order"
    dt_levels: List[float] = Field(default_factory=lambda: [1e-2, 1e-3, 1e-4])
    solver_dt: float = Field(default=1e-3, gt=0)
    dt_sde: float = Field(default=1e-3, gt=0)
    interpolation: InterpolationOrder = InterpolationOrder.LINEAR
    refinement_levels: int = Field(default=3, ge=2)  # OU 一致性 / Itô-Wentzell 检查的加密层数
    equivalence_paths: int = Field(default=50, ge=1)
    marginal_fractions: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])
    history_budget: int = Field(default=4096, ge=16)
    impact: Literal["non-permanent", "permanent"] = "non-permanent"
    shares: float = Field(default=1.0, ge=0)  # 清算总量 X
    slices: int = Field(default=10, ge=1)
    schedule_file: Optional[Path] = None  # CSV (t, shares)
    level: float = Field(default=0.9, gt=0, lt=1)

    @field_validator("dt_levels")
    @classmethod
    def _levels_positive(cls, v: List[float]) -> List[float]:
        if any(x <= 0 for x in v):
            raise ValueError("dt_levels 必须全为正")
        return v

    @field_validator("marginal_fractions")
    @classmethod
    def _fractions_in_unit(cls, v: List[float]) -> List[float]:
        if not v or any(not 0 < x <= 1 for x in v):
            raise ValueError("marginal_fractions 必须在 (0,1] 内")
        return sorted(v)


# ================== monte carlo 块 ==================
class MonteCarloConfig(BaseModel):
    """蒙特卡洛参数"""
    paths: int = Field(default=100, ge=1)
    limit_paths: Optional[int] = Field(default=None, ge=1)  # 缺省与 paths 相同
    seed: int = Field(default=20240611, ge=0)
    batch_size: int = Field(default=128, ge=1)
    parallelism: Optional[int] = Field(default=None, ge=1)  # 缺省为逻辑核数
    stride: int = Field(default=100, ge=1)  # 每条路径保存的 u 快照数
    max_failure_fraction: float = Field(default=0.01, ge=0, le=1)

    @property
    def n_limit_paths(self) -> int:
        return self.limit_paths or self.paths


# ================== output 块 ==================
class OutputConfig(BaseModel):
    """产物输出"""
    out_dir: Path = Path("runs/latest")
    persist_paths: bool = False  # 是否写出逐路径序列
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])  # 逐路径序列的格式


_EXPERIMENT_REGIMES = {
    "fast-clt": {Regime.FAST},
    "slow-clt": {Regime.SLOW},
}

# 在 experiment.dt_levels 的每一层上模拟的实验
_SWEEP_EXPERIMENTS = {"first-order", "fast-clt", "slow-clt"}
TICK_RTOL = 1e-12


class RunConfig(BaseModel):
    """一次运行的完整配置，可序列化"""
    scaling: ScalingConfig = Field(default_factory=ScalingConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    monte_carlo: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    enforce: bool = False  # --assert

    @model_validator(mode="after")
    def _check_compatibility(self) -> "RunConfig":
        # ScalingRegime 自身的校验会给出 scaling.* 字段路径
        self.scaling.to_regime()
        name = self.experiment.name
        allowed = _EXPERIMENT_REGIMES.get(name)
        if allowed and self.scaling.regime not in allowed:
            raise ConfigurationError(
                f"实验 {name} 与区间 {self.scaling.regime.value} 不兼容",
                {"fields": [{"loc": "scaling.regime", "msg": f"{name} 需要 {sorted(r.value for r in allowed)}"}]},
            )
        if name == "liquidation":
            permanent = self.experiment.impact == "permanent"
            if permanent and self.scaling.regime is not Regime.SLOW:
                raise ConfigurationError(
                    "永久冲击清算需要 slow 区间",
                    {"fields": [{"loc": "scaling.regime", "msg": "permanent 需要 slow"}]},
                )
            if not permanent and self.scaling.regime is not Regime.FAST:
                raise ConfigurationError(
                    "非永久冲击清算需要 fast 区间",
                    {"fields": [{"loc": "scaling.regime", "msg": "non-permanent 需要 fast"}]},
                )
        if name == "first-order" and len(self.experiment.dt_levels) < 3:
            raise ConfigurationError(
                "收敛扫描至少需要 3 个 dt 层",
                {"fields": [{"loc": "experiment.dt_levels", "msg": "至少 3 个"}]},
            )
        self._check_tick()
        if name == "fast-clt" and self.model.name == "example-3-10":
            raise ConfigurationError(
                "example-3-10 没有 pDiff，不能用于 fast-clt",
                {"fields": [{"loc": "model.name", "msg": "改用 example-fast 或 constant-test"}]},
            )
        return self

    def _check_tick(self) -> None:
        """离散模型的格距由 Δx = Δt^α 决定，grid.tick 只能等于每个模拟层的 Δx"""
        tick = self.grid.tick
        if tick is None:
            return
        levels = [self.scaling.dt]
        if self.experiment.name in _SWEEP_EXPERIMENTS:
            levels += list(self.experiment.dt_levels)
        for dt in levels:
            dx = self.scaling.to_regime(dt).dx
            if abs(tick - dx) > TICK_RTOL * dx:
                raise ConfigurationError(
                    "grid.tick 与 Δx 不一致",
                    {"fields": [{"loc": "grid.tick",
                                 "msg": f"dt={dt:g} 时 Δx={dx:.17g}，离散网格不能另设格距；极限侧网格用 grid.sde_tick"}]},
                )
