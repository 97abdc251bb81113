"""
异常定义

所有业务异常都继承 LobError，携带 detail 字典，CLI 层据此决定退出码并写入报告。
"""

from typing import Any, Dict, Optional


class LobError(Exception):
    """基础异常"""

    exit_code: int = 3

    def __init__(self, message: str, detail: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.detail: Dict[str, Any] = detail or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": self.message, "detail": self.detail}


class GridMismatchError(LobError):
    """两个网格函数不在同一网格上"""


class NumericError(LobError):
    """出现非有限数值（NaN / inf），detail 中给出位置"""


class ModelValidityError(LobError):
    """模型系数不满足前提，例如 Δp·(pA+pB) > 1"""


class ConfigurationError(LobError):
    """配置错误，detail['fields'] 给出字段路径"""

    exit_code = 2


class RangeError(LobError):
    """查询时间超出已有历史"""


class InfeasibleTradeError(LobError):
    """成交量超过盘口可用量"""

    def __init__(self, message: str, index: Optional[int] = None, detail: Optional[Dict[str, Any]] = None):
        detail = dict(detail or {})
        if index is not None:
            detail["trade_index"] = index
        super().__init__(message, detail)
        self.index = index


class InsufficientSampleError(LobError):
    """样本量不足，拒绝做统计比较"""


class CovarianceError(LobError):
    """噪声协方差 PSD 投影后仍无法分解"""


class PathFailureError(LobError):
    """出窗口的路径过多，熔断器打开"""


class AcceptanceError(LobError):
    """--assert 模式下验收条件未通过"""

    exit_code = 1
