"""实验报告数据模型"""
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


# ================== 收敛扫描 ==================
class LevelRow(BaseModel):
    """收敛扫描的一层"""
    dt: float
    dx: float
    paths: int
    aborted: int = 0
    median_sup_b: Optional[float] = None  # 一阶：median sup_t |B^(n) - B|
    median_sup_y: Optional[float] = None
    ks_zb: Optional[float] = None  # 二阶：Z^B(T) 的 KS 距离
    ks_zy: Optional[float] = None
    lost_mass: float = 0.0  # 平均出窗口量
    y_drift: float = 0.0  # Y 增量对账的最大相对误差


# ================== 统计检验 ==================
class KsResult(BaseModel):
    """两样本 KS 检验"""
    name: str
    statistic: float
    pvalue: float
    critical: float  # 给定显著性水平下的渐近临界值
    level: float
    n: int
    m: int
    lattice_matched: bool = False  # 极限样本是否已对齐到 tick 格点

    @property
    def passed(self) -> bool:
        return self.statistic <= self.critical


class MomentComparison(BaseModel):
    """均值/方差/与 Z^B 协方差的比较，z = 差 / 渐近标准误"""
    name: str
    mean_discrete: float
    mean_limit: float
    mean_z: float
    var_discrete: float
    var_limit: float
    var_z: float
    cov_discrete: float
    cov_limit: float
    cov_z: float
    threshold: float = 4.0

    @property
    def passed(self) -> bool:
        return max(abs(self.mean_z), abs(self.var_z), abs(self.cov_z)) <= self.threshold


class LatticeReport(BaseModel):
    """tick 格点对 KS 分辨率影响的预检"""
    spacing: float  # Z 单位下的格点间距
    cdf_spacing: float  # 乘上极限密度上界后的 CDF 间距
    critical: float
    passed: bool


class MarginalReport(BaseModel):
    """某一固定时刻的边际分布比较"""
    t: float
    ks: List[KsResult]
    moments: List[MomentComparison]
    lattice: Optional[LatticeReport] = None


# ================== 验收 ==================
class CriterionResult(BaseModel):
    """单条验收条件"""
    name: str
    passed: bool
    value: Optional[float] = None
    threshold: Optional[float] = None
    diagnostic: bool = False  # 只报告，不参与退出码
    note: str = ""


class ExperimentReport(BaseModel):
    """实验报告"""
    experiment: str
    model: str
    regime: str
    config_hash: str
    seed: int
    criteria: List[CriterionResult] = Field(default_factory=list)
    levels: List[LevelRow] = Field(default_factory=list)
    marginals: List[MarginalReport] = Field(default_factory=list)
    liquidation: Optional["LiquidationInterval"] = None
    diagnostics: Dict[str, float] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria if not c.diagnostic)


# ================== 清算 ==================
class LiquidationInterval(BaseModel):
    """清算价值的置信区间"""
    V: float
    lo: float
    hi: float
    level: float
    M: int
    regime: str
    impact: str
    coverage: Optional[float] = None  # 离散模拟实现值落入区间的比例


# ================== manifest ==================
class RunManifest(BaseModel):
    """运行清单：每个产物都对应同一个配置哈希"""
    config_hash: str
    seed: int
    experiment: str
    versions: Dict[str, str]
    artifacts: List[str]
    started_at: str
    finished_at: str
    exit_code: int = 0


ExperimentReport.model_rebuild()
