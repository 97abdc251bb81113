import logging
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from app.core.grid import GridFunction
from app.router.base import ExperimentContext, ExperimentRouter, criterion
from app.schema.base import BaseReport
from app.schema.report import LiquidationInterval
from app.service.liquidation import (
    TradePlan,
    ci_nonpermanent,
    ci_permanent,
    coverage,
    impacted_first_order,
    permanent_plan,
    plan_trades,
    read_schedule,
    realized_value,
    schedule_frame,
    uniform_schedule,
)

logger = logging.getLogger(__name__)

router = ExperimentRouter()

# 覆盖率验收带：非永久冲击为正式条件，永久冲击只作诊断
COVERAGE_BANDS: Dict[str, Tuple[float, float]] = {
    "non-permanent": (0.85, 0.95),
    "permanent": (0.80, 0.98),
}


def _arrays(weights: Dict[str, GridFunction]) -> Dict[str, np.ndarray]:
    return {name: fn.values for name, fn in weights.items()}


def plan_frame(plan: TradePlan) -> pd.DataFrame:
    return pd.DataFrame({
        "t": plan.times,
        "shares": plan.shares,
        "depth": plan.depths,
        "price": plan.prices,
        "value": plan.values,
    })


@router.experiment("liquidation")
def liquidation(ctx: ExperimentContext):
    """
    组合清算价值的置信区间及其覆盖率

    一阶价值在离散网格（tick = Δx）上计算；修正项的极限蒙特卡洛在 grid.sde_tick 网格上，
    测试函数为各笔成交的 x·1_{(-c_i,0]}。覆盖率由带同一计划的离散模拟实现值给出。
    """
    cfg = ctx.config
    exp, mc = cfg.experiment, cfg.monte_carlo
    permanent = exp.impact == "permanent"

    recipe = ctx.recipe()
    spec, regime = recipe.build()
    if exp.schedule_file is not None:
        schedule = read_schedule(exp.schedule_file)
    else:
        schedule = uniform_schedule(exp.shares, exp.slices, regime.horizon, regime.dt)
    ctx.storage.write_table(schedule_frame(schedule), "schedule.csv")

    sde_recipe = ctx.sde_recipe()
    sde_spec, sde_regime = sde_recipe.build()
    if permanent:
        impacted = impacted_first_order(schedule, spec, regime, exp.solver_dt, exp.interpolation)
        sde_impacted = impacted_first_order(schedule, sde_spec, sde_regime, exp.solver_dt, exp.interpolation)
        plan = permanent_plan(impacted)
        weights = permanent_plan(sde_impacted).weight_functions(sde_spec.grid)
        ctx.storage.write_table(impacted.to_frame(), "limit_path.csv")
        for i, segment in enumerate(impacted.segments):
            ctx.persist_limit_path(segment, f"segment{i}")
        ctx.monitor.stage("impacted-first-order", trades=int(plan.times.size), removed=float(impacted.removed.sum()))
        limit = ctx.slow_limit(sde_recipe, sde_impacted, mc.n_limit_paths, plan.times,
                               tests=_arrays(weights), trades=tuple(sde_impacted.jumps()))
        interval = ci_permanent(impacted, limit.ZB, limit.pairings, regime, exp.level)
        ctx.persist_fluctuations(limit, sde_spec.grid, "slow_limit")
    else:
        path = ctx.limit_path(spec, regime)
        plan = plan_trades(schedule, path)
        sde_path = ctx.limit_path(sde_spec, sde_regime)
        weights = plan_trades(schedule, sde_path).weight_functions(sde_spec.grid)
        ctx.storage.write_table(path.to_frame(), "limit_path.csv")
        ctx.persist_limit_path(path, "first_order")
        limit = ctx.fast_limit(sde_recipe, sde_path, mc.n_limit_paths, plan.times, tests=_arrays(weights))
        interval = ci_nonpermanent(plan, limit.ZB, limit.pairings, regime, exp.level)
        ctx.persist_fluctuations(limit, sde_spec.grid, "fast_limit")
    ctx.storage.write_table(plan_frame(plan), "trades.csv")
    ctx.monitor.stage("limit-mc", paths=interval.M, V=interval.V, lo=interval.lo, hi=interval.hi)

    batch = ctx.simulate(recipe, mc.paths, snapshot_count=mc.stride, trades=tuple(schedule.to_trades(regime)),
                         permanent=permanent, with_tests=False)
    realized = realized_value(batch)
    ctx.persist_discrete(batch, "liquidation")
    interval.coverage = coverage(realized, interval)
    ctx.storage.write_table(pd.DataFrame({"path_id": batch.path_ids[~batch.aborted], "value": realized}),
                            "realized.csv")
    ctx.storage.write_json(BaseReport[LiquidationInterval](data=interval), "interval.json")
    ctx.monitor.stage("coverage", paths=int(realized.size), coverage=interval.coverage)

    lo, hi = COVERAGE_BANDS[exp.impact]
    inside = interval.coverage is not None and lo <= interval.coverage <= hi
    criteria = [
        criterion(f"{exp.level:.0%} interval coverage in [{lo:.0%}, {hi:.0%}]", inside, interval.coverage, lo,
                  diagnostic=permanent,
                  note="永久冲击的近似没有定理保证，只作诊断" if permanent else ""),
    ]
    return ctx.report(
        criteria,
        liquidation=interval,
        diagnostics={
            "realized_mean": float(np.mean(realized)) if realized.size else float("nan"),
            "realized_std": float(np.std(realized)) if realized.size else float("nan"),
            "total_shares": schedule.total,
        },
    )
