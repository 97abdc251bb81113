import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigurationError, InsufficientSampleError
from app.core.grid import default_test_functions
from app.core.model import ModelSpec
from app.core.scaling import ScalingRegime
from app.monitor.run_monitor import RunMonitor
from app.schema.report import CriterionResult, ExperimentReport, MarginalReport
from app.schema.run_config import RunConfig
from app.service.clt_harness import (
    compare_marginals,
    discrete_series_frame,
    discrete_snapshot_frame,
    extract_fluctuations,
    fluctuation_series_frame,
    limit_snapshot_frame,
    terminal_zu_frame,
)
from app.service.fom_solver import LimitPath, solve_first_order
from app.service.simulator import DiscretePathBatch
from app.service.som_fast import FastMonteCarloResult
from app.service.som_slow import SlowMonteCarloResult
from app.service.worker_pool import (
    DiscreteTask,
    FastTask,
    ModelRecipe,
    PathPool,
    SlowTask,
    merge_discrete,
    merge_fast,
    merge_slow,
    run_discrete,
    run_fast,
    run_slow,
)
from app.utils.circuit_breaker import PathFailureBreaker
from app.utils.file_storage import ArtifactStorage

logger = logging.getLogger(__name__)

PATHS_FOLDER = "paths"


@dataclass
class ExperimentContext:
    """一次实验运行共享的配置、产物存储、监控、熔断器与进程池"""

    config: RunConfig
    config_hash: str
    storage: ArtifactStorage
    monitor: RunMonitor
    breaker: PathFailureBreaker = field(default_factory=PathFailureBreaker)
    pool: PathPool = field(default_factory=PathPool)

    @classmethod
    def create(cls, config: RunConfig, config_hash: str) -> "ExperimentContext":
        mc = config.monte_carlo
        breaker = PathFailureBreaker(max_failure_fraction=mc.max_failure_fraction)
        monitor = RunMonitor(config.experiment.name)
        return cls(
            config=config,
            config_hash=config_hash,
            storage=ArtifactStorage(config.output.out_dir),
            monitor=monitor,
            breaker=breaker,
            pool=PathPool(parallelism=mc.parallelism, batch_size=mc.batch_size),
        )

    @property
    def seed(self) -> int:
        return self.config.monte_carlo.seed

    # ====== 模型 ======

    def recipe(self, dt: Optional[float] = None, tick: Optional[float] = None) -> ModelRecipe:
        cfg = self.config
        return ModelRecipe(
            model=cfg.model,
            scaling=cfg.scaling,
            dt=cfg.scaling.dt if dt is None else dt,
            tick=cfg.grid.tick if tick is None else tick,
            half_width=cfg.grid.half_width,
        )

    def sde_recipe(self, refinement: int = 0) -> ModelRecipe:
        """极限方程所用网格：grid.sde_tick，缺省为离散网格的 tick；每加密一层 tick 减半"""
        base = self.config.scaling.to_regime()
        grid = self.config.grid
        tick = (grid.sde_tick or grid.tick or base.dx) / 2 ** refinement
        return self.recipe(tick=tick)

    def limit_path(self, spec: ModelSpec, regime: ScalingRegime) -> LimitPath:
        exp = self.config.experiment
        return solve_first_order(spec, regime, min(exp.solver_dt, regime.horizon), interpolation=exp.interpolation)

    # ====== 路径批 ======

    def _on_discrete(self, batch: DiscretePathBatch) -> None:
        aborted = int(batch.aborted.sum())
        self.monitor.paths(batch.size, aborted)
        if aborted:
            self.monitor.warn(f"{aborted} 条路径离开截断窗口")
        self.breaker.record(batch.aborted)

    def simulate(self, recipe: ModelRecipe, n_paths: int, **task_fields) -> DiscretePathBatch:
        task_fields.setdefault("keep_snapshots", self.persist_paths)
        tasks = [DiscreteTask(recipe=recipe, seed=self.seed, path_ids=ids, **task_fields)
                 for ids in self.pool.batches(n_paths)]
        self.pool.on_result = self._on_discrete
        try:
            return merge_discrete(self.pool.map(run_discrete, tasks))
        finally:
            self.pool.on_result = None

    def fast_limit(self, recipe: ModelRecipe, limit_path: LimitPath, n_paths: int,
                   record_times: Sequence[float], dt_sde: Optional[float] = None, **task_fields) -> FastMonteCarloResult:
        dt_sde = dt_sde or self.config.experiment.dt_sde
        task_fields.setdefault("keep_terminal", self.persist_paths)
        tasks = [FastTask(recipe=recipe, limit_path=limit_path, seed=self.seed, path_ids=ids,
                          record_times=tuple(record_times), dt_sde=dt_sde, **task_fields)
                 for ids in self.pool.batches(n_paths)]
        return merge_fast(self.pool.map(run_fast, tasks))

    def slow_limit(self, recipe: ModelRecipe, limit_path, n_paths: int,
                   record_times: Sequence[float], dt_sde: Optional[float] = None, **task_fields) -> SlowMonteCarloResult:
        dt_sde = dt_sde or self.config.experiment.dt_sde
        task_fields.setdefault("history_budget", self.config.experiment.history_budget)
        task_fields.setdefault("keep_terminal", self.persist_paths)
        tasks = [SlowTask(recipe=recipe, limit_path=limit_path, seed=self.seed, path_ids=ids,
                          record_times=tuple(record_times), dt_sde=dt_sde, **task_fields)
                 for ids in self.pool.batches(n_paths)]
        return merge_slow(self.pool.map(run_slow, tasks))

    # ====== 逐路径输出 ======

    @property
    def persist_paths(self) -> bool:
        return self.config.output.persist_paths

    def _write_paths(self, frame, name: str) -> None:
        self.storage.write_frame(frame, name, self.config.output.formats, subfolder=PATHS_FOLDER)

    def persist_discrete(self, batch: DiscretePathBatch, label: str) -> None:
        """离散路径的 (k, t_k, B, Y) 序列与 u 快照，output.persist_paths 为假时不写"""
        if not self.persist_paths:
            return
        self._write_paths(discrete_series_frame(batch), f"discrete_{label}")
        if batch.snapshots is not None:
            self._write_paths(discrete_snapshot_frame(batch), f"discrete_{label}_u")

    def persist_limit_path(self, path: LimitPath, label: str) -> None:
        if not self.persist_paths:
            return
        self._write_paths(path.to_frame(), f"limit_{label}")
        self._write_paths(limit_snapshot_frame(path, self.config.monte_carlo.stride), f"limit_{label}_u")

    def persist_fluctuations(self, result, grid, label: str) -> None:
        """极限侧逐路径 (t, ZB, ZY) 与终端 Z^u"""
        if not self.persist_paths:
            return
        self._write_paths(fluctuation_series_frame(result), f"{label}_series")
        if result.terminal_zu is not None:
            self._write_paths(terminal_zu_frame(result, grid), f"{label}_terminal_zu")

    # ====== 报告 ======

    def report(self, criteria: List[CriterionResult], **fields) -> ExperimentReport:
        cfg = self.config
        return ExperimentReport(
            experiment=cfg.experiment.name,
            model=cfg.model.name,
            regime=cfg.scaling.regime.value,
            config_hash=self.config_hash,
            seed=self.seed,
            criteria=criteria,
            **fields,
        )


Handler = Callable[[ExperimentContext], ExperimentReport]


class ExperimentRouter:
    """实验名 → 处理函数的注册表，子路由用 include_router 汇总"""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self.handlers: Dict[str, Handler] = {}

    def experiment(self, name: str) -> Callable[[Handler], Handler]:
        def decorator(fn: Handler) -> Handler:
            self.handlers[self.prefix + name] = fn
            return fn

        return decorator

    def include_router(self, other: "ExperimentRouter") -> None:
        for name, fn in other.handlers.items():
            if name in self.handlers:
                raise ValueError(f"实验 {name} 重复注册")
            self.handlers[name] = fn

    def names(self) -> List[str]:
        return sorted(self.handlers)

    def dispatch(self, ctx: ExperimentContext) -> ExperimentReport:
        name = ctx.config.experiment.name
        handler = self.handlers.get(name)
        if handler is None:
            raise ConfigurationError(
                f"未知实验 {name}",
                {"fields": [{"loc": "experiment.name", "msg": f"可选 {self.names()}"}]},
            )
        logger.info(f"开始实验 {name} (config_hash={ctx.config_hash[:12]}, seed={ctx.seed})")
        return handler(ctx)


def criterion(name: str, passed: bool, value: Optional[float] = None, threshold: Optional[float] = None,
              diagnostic: bool = False, note: str = "") -> CriterionResult:
    return CriterionResult(name=name, passed=bool(passed), value=None if value is None else float(value),
                           threshold=None if threshold is None else float(threshold),
                           diagnostic=diagnostic, note=note)


def snapshot_steps(times: Sequence[float], dt: float) -> Tuple[int, ...]:
    return tuple(int(round(t / dt)) for t in times)


def finest_marginals(ctx: ExperimentContext, finest: Dict[str, object], limit_at: Dict[float, Dict[str, np.ndarray]],
                     times: Sequence[float], level: float, criteria: List[CriterionResult]) -> List[MarginalReport]:
    """
    最细 dt 层在各记录时刻的边际比较

    Z^B_n 落在间距 Δx/√Δ、偏移 (B0 - B_t)/√Δ 的格点上；样本不足时记一条失败的条件并返回空表。
    """
    spec, regime, path, batch = finest["spec"], finest["regime"], finest["path"], finest["batch"]
    sample = extract_fluctuations(batch, path, regime, default_test_functions(spec.grid, spec.h))
    scale = math.sqrt(regime.rescale)
    reports = []
    for t in times:
        offset = (spec.B0 - float(path.B_at(t))) / scale
        try:
            reports.append(compare_marginals(sample.marginals(t), limit_at[t], t, level=level,
                                             zb_lattice=regime.dx / scale, zb_offset=offset))
        except InsufficientSampleError as e:
            ctx.monitor.warn(e.message)
            criteria.append(criterion("marginal sample size", False, e.detail.get("discrete"),
                                      e.detail.get("required"), note=e.message))
            return []
    return reports


def record_times(ctx: ExperimentContext) -> List[float]:
    """边际比较时刻：marginal_fractions·T 并上 T"""
    horizon = ctx.config.scaling.horizon
    return sorted({f * horizon for f in ctx.config.experiment.marginal_fractions} | {horizon})
