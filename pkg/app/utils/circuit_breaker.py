import logging
from enum import Enum
from functools import wraps
from typing import Callable

import numpy as np

from app.core.exceptions import PathFailureError

logger = logging.getLogger(__name__)


class CircuitState(Enum):
    """熔断器状态"""
    CLOSED = "closed"  # 正常
    OPEN = "open"  # 熔断


class PathFailureBreaker:
    """
    路径失败熔断器

    离开截断窗口的路径会被中止并计数；已完成路径数达到 min_paths 后，
    中止比例超过 max_failure_fraction 即熔断，实验以 PathFailureError 结束。
    可以当装饰器包装返回批结果（带 aborted 数组）的函数。
    """

    def __init__(self, max_failure_fraction: float = 0.01, min_paths: int = 100):
        self.max_failure_fraction = max_failure_fraction
        self.min_paths = min_paths
        self.total = 0
        self.failures = 0
        self.state = CircuitState.CLOSED

    @property
    def failure_fraction(self) -> float:
        return self.failures / self.total if self.total else 0.0

    def __call__(self, func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            self._check_open()
            batch = func(*args, **kwargs)
            self.record(np.asarray(batch.aborted, dtype=bool))
            return batch

        return wrapper

    def _check_open(self):
        if self.state == CircuitState.OPEN:
            raise PathFailureError(
                "中止路径比例超过阈值，实验已熔断",
                {"failures": self.failures, "total": self.total, "max_fraction": self.max_failure_fraction},
            )

    def record(self, aborted: np.ndarray) -> None:
        """登记一批路径的中止情况"""
        n_failed = int(np.sum(aborted))
        self.total += int(aborted.size)
        if n_failed:
            self._on_failure(n_failed)
        self._check_open()

    def _on_failure(self, n_failed: int):
        self.failures += n_failed
        logger.warning(f"{n_failed} 条路径被中止，累计 {self.failures}/{self.total}")
        if self.total >= self.min_paths and self.failure_fraction > self.max_failure_fraction:
            self.state = CircuitState.OPEN
            logger.error(f"熔断器触发，中止比例: {self.failure_fraction:.4f}")

    def reset(self):
        self.total = 0
        self.failures = 0
        self.state = CircuitState.CLOSED
