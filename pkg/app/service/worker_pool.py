"""
按路径批并行

ModelSpec 含闭包，不能跨进程传递；任务里只放可 pickle 的配置（ModelRecipe），
worker 内重建模型并按配置缓存。极限路径是纯数组，可以直接传递。
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.builtin_models import build_model, model_factory
from app.core.grid import GridFunction, default_test_functions
from app.core.model import ModelSpec
from app.core.scaling import ScalingRegime
from app.schema.run_config import ModelConfig, ScalingConfig
from app.service.simulator import BookSimulator, DiscretePathBatch, TradeRecord
from app.service.som_fast import FastFluctuationSolver, FastMonteCarloResult
from app.service.som_slow import SlowFluctuationSolver, SlowMonteCarloResult, TradeJump

logger = logging.getLogger(__name__)

_SPEC_CACHE: Dict[str, Tuple[ModelSpec, ScalingRegime]] = {}


@dataclass(frozen=True)
class ModelRecipe:
    """重建 ModelSpec 所需的全部配置"""
    model: ModelConfig
    scaling: ScalingConfig
    dt: float
    tick: Optional[float] = None
    half_width: Optional[float] = None

    def key(self) -> str:
        return json.dumps({
            "model": self.model.model_dump(mode="json"),
            "scaling": self.scaling.model_dump(mode="json"),
            "dt": self.dt,
            "tick": self.tick,
            "half_width": self.half_width,
        }, sort_keys=True)

    def build(self) -> Tuple[ModelSpec, ScalingRegime]:
        key = self.key()
        if key not in _SPEC_CACHE:
            regime = self.scaling.to_regime(self.dt)
            grid = model_factory.grid_for(self.model, regime, self.tick, self.half_width)
            _SPEC_CACHE[key] = (build_model(self.model, regime, grid), regime)
        return _SPEC_CACHE[key]


def _named(spec: ModelSpec, arrays: Optional[Dict[str, np.ndarray]]) -> Dict[str, GridFunction]:
    if arrays is None:
        return default_test_functions(spec.grid, spec.h)
    return {name: GridFunction(spec.grid, values) for name, values in arrays.items()}


# ====== 任务 ======

@dataclass
class DiscreteTask:
    recipe: ModelRecipe
    seed: int
    path_ids: List[int]
    snapshot_count: int = 100
    extra_steps: Tuple[int, ...] = ()
    keep_snapshots: bool = False
    trades: Tuple[TradeRecord, ...] = ()
    permanent: bool = False
    with_tests: bool = True


def run_discrete(task: DiscreteTask) -> DiscretePathBatch:
    spec, regime = task.recipe.build()
    tests = default_test_functions(spec.grid, spec.h) if task.with_tests else {}
    simulator = BookSimulator(
        spec,
        regime,
        test_functions=tests,
        snapshot_count=task.snapshot_count,
        extra_snapshot_steps=task.extra_steps,
        keep_snapshots=task.keep_snapshots,
        trades=task.trades,
        permanent=task.permanent,
    )
    return simulator.run(task.seed, task.path_ids)


@dataclass
class FastTask:
    recipe: ModelRecipe
    limit_path: object
    seed: int
    path_ids: List[int]
    record_times: Tuple[float, ...]
    dt_sde: float
    substeps: int = 1
    tests: Optional[Dict[str, np.ndarray]] = None
    keep_terminal: bool = False


def run_fast(task: FastTask) -> FastMonteCarloResult:
    spec, regime = task.recipe.build()
    solver = FastFluctuationSolver(spec, regime, task.limit_path, task.dt_sde, substeps=task.substeps)
    return solver.run(task.seed, task.path_ids, task.record_times, _named(spec, task.tests),
                      keep_terminal=task.keep_terminal)


@dataclass
class SlowTask:
    recipe: ModelRecipe
    limit_path: object
    seed: int
    path_ids: List[int]
    record_times: Tuple[float, ...]
    dt_sde: float
    substeps: int = 1
    tests: Optional[Dict[str, np.ndarray]] = None
    trades: Tuple[TradeJump, ...] = ()
    volterra_check: bool = False
    history_budget: int = 4096
    zb0: float = 0.0
    keep_terminal: bool = False


def run_slow(task: SlowTask) -> SlowMonteCarloResult:
    spec, regime = task.recipe.build()
    solver = SlowFluctuationSolver(spec, regime, task.limit_path, task.dt_sde, substeps=task.substeps,
                                   trades=task.trades, history_budget=task.history_budget)
    return solver.run(task.seed, task.path_ids, task.record_times, _named(spec, task.tests),
                      zb0=task.zb0, volterra_check=task.volterra_check, keep_terminal=task.keep_terminal)


# ====== 合并 ======

def _cat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(parts), axis=0)


def _cat_optional(parts: Sequence[Optional[np.ndarray]]) -> Optional[np.ndarray]:
    return None if any(p is None for p in parts) else _cat(parts)


def merge_discrete(parts: Sequence[DiscretePathBatch]) -> DiscretePathBatch:
    first = parts[0]
    if len(parts) == 1:
        return first
    return DiscretePathBatch(
        path_ids=_cat([p.path_ids for p in parts]),
        regime=first.regime,
        times=first.times,
        B=_cat([p.B for p in parts]),
        Y=_cat([p.Y for p in parts]),
        snapshot_steps=first.snapshot_steps,
        pairings={k: _cat([p.pairings[k] for p in parts]) for k in first.pairings},
        lost_mass=_cat([p.lost_mass for p in parts]),
        y_drift=_cat([p.y_drift for p in parts]),
        aborted=_cat([p.aborted for p in parts]),
        omega_sum=_cat([p.omega_sum for p in parts]),
        trade_values=_cat([p.trade_values for p in parts]),
        snapshots=_cat_optional([p.snapshots for p in parts]),
        grid=first.grid,
    )


def merge_fast(parts: Sequence[FastMonteCarloResult]) -> FastMonteCarloResult:
    first = parts[0]
    return FastMonteCarloResult(
        path_ids=_cat([p.path_ids for p in parts]),
        record_times=first.record_times,
        ZB=_cat([p.ZB for p in parts]),
        ZY=_cat([p.ZY for p in parts]),
        ZY_ou=_cat([p.ZY_ou for p in parts]),
        pairings={k: _cat([p.pairings[k] for p in parts]) for k in first.pairings},
        ou_gap=_cat([p.ou_gap for p in parts]),
        refactorizations=max(p.refactorizations for p in parts),
        projection_delta=max(p.projection_delta for p in parts),
        clamped_cells=max(p.clamped_cells for p in parts),
        terminal_zu=_cat_optional([p.terminal_zu for p in parts]),
    )


def merge_slow(parts: Sequence[SlowMonteCarloResult]) -> SlowMonteCarloResult:
    first = parts[0]
    return SlowMonteCarloResult(
        path_ids=_cat([p.path_ids for p in parts]),
        record_times=first.record_times,
        ZB=_cat([p.ZB for p in parts]),
        ZY=_cat([p.ZY for p in parts]),
        pairings={k: _cat([p.pairings[k] for p in parts]) for k in first.pairings},
        volterra_pairings={k: _cat([p.volterra_pairings[k] for p in parts]) for k in first.volterra_pairings},
        zy_gap=_cat([p.zy_gap for p in parts]),
        coarsenings=max(p.coarsenings for p in parts),
        max_substeps=max(p.max_substeps for p in parts),
        terminal_zu=_cat_optional([p.terminal_zu for p in parts]),
    )


# ====== 进程池 ======

@dataclass
class PathPool:
    """
    路径批的进程池

    Args:
        parallelism: 进程数，缺省为逻辑核数；1 时在本进程内顺序执行
        batch_size: 每个任务的路径数
    """

    parallelism: Optional[int] = None
    batch_size: int = 128
    on_result: Optional[Callable[[object], None]] = field(default=None, repr=False)

    @property
    def workers(self) -> int:
        return self.parallelism or os.cpu_count() or 1

    def batches(self, n_paths: int, offset: int = 0) -> List[List[int]]:
        ids = list(range(offset, offset + n_paths))
        return [ids[i:i + self.batch_size] for i in range(0, len(ids), self.batch_size)]

    def map(self, fn: Callable, tasks: Sequence) -> List:
        """按任务顺序返回结果；每个结果到达时调用 on_result（熔断检查）"""
        results = []
        if self.workers == 1 or len(tasks) <= 1:
            for task in tasks:
                results.append(self._accept(fn(task)))
            return results
        with ProcessPoolExecutor(max_workers=min(self.workers, len(tasks))) as executor:
            for result in executor.map(fn, tasks):
                results.append(self._accept(result))
        return results

    def _accept(self, result):
        if self.on_result is not None:
            self.on_result(result)
        return result
