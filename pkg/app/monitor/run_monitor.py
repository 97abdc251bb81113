import logging
import time
from typing import Any, Dict, List

logger = logging.getLogger(__name__)


class RunMonitor:
    """运行进度监控：每完成一个 dt 层或蒙特卡洛阶段记一行日志"""

    def __init__(self, experiment: str):
        self.experiment = experiment
        self.started = time.perf_counter()
        self.stages: List[Dict[str, Any]] = []
        self.stats = {
            "paths_done": 0,
            "paths_aborted": 0,
            "warnings": 0,
        }

    def stage(self, name: str, **fields: Any) -> None:
        elapsed = time.perf_counter() - self.started
        entry = {"stage": name, "elapsed": round(elapsed, 3), **fields}
        self.stages.append(entry)
        extra = ", ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
        logger.info(f"[{self.experiment}] {name} 完成 ({elapsed:.1f}s){': ' + extra if extra else ''}")

    def paths(self, done: int, aborted: int = 0) -> None:
        self.stats["paths_done"] += done
        self.stats["paths_aborted"] += aborted

    def warn(self, message: str) -> None:
        self.stats["warnings"] += 1
        logger.warning(f"[{self.experiment}] {message}")

    def summary(self) -> Dict[str, float]:
        return {
            "elapsed": time.perf_counter() - self.started,
            **{k: float(v) for k, v in self.stats.items()},
        }


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)
