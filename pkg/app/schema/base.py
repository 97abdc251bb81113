"""报告外层结构"""
from typing import Generic, List, TypeVar

from pydantic import BaseModel

# 定义泛型
T = TypeVar('T')


# 所有 JSON 产物共用的外层
class BaseReport(BaseModel, Generic[T]):
    code: int = 0  # 与 CLI 退出码一致
    message: str = "success"
    data: T


# 按 dt 层组织的表格
class LevelTable(BaseModel, Generic[T]):
    rows: List[T]
    total: int
    monotone: bool
