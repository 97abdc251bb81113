import logging
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from app.router.base import (
    ExperimentContext,
    ExperimentRouter,
    criterion,
    finest_marginals,
    record_times,
    snapshot_steps,
)
from app.schema.report import CriterionResult, MarginalReport
from app.service.clt_harness import (
    convergence_sweep,
    is_decreasing,
    levels_frame,
    limit_sample,
    marginals_frame,
)

logger = logging.getLogger(__name__)

router = ExperimentRouter()

KS_LEVEL = 0.01
VARIANCE_TESTS = ("bump_-3", "bump_-2", "bump_-1")
VARIANCE_TOL = 0.1
# dt_sde 减半时 sup 差距应减半（±30%）
OU_RATIO_BAND = (2.0 * 0.7, 2.0 * 1.3)
PROJECTION_TOL = 1e-10


@router.experiment("fast-clt")
def fast_clt(ctx: ExperimentContext):
    """
    fast 区间价格 CLT

    极限侧：Z^B 的 SDE 与 Z^u 网格 SDE 的蒙特卡洛；离散侧：各 dt 层的 Z^B_n、Z^Y_n 与配对。
    比较 Z^B(T) 的 KS 距离、配对方差，并检查 ⟨Z^u,h⟩ 与标量 OU 的一致性和噪声核的有效性。
    """
    cfg = ctx.config
    exp, mc = cfg.experiment, cfg.monte_carlo
    times = record_times(ctx)

    sde_recipe = ctx.sde_recipe()
    sde_spec, sde_regime = sde_recipe.build()
    sde_path = ctx.limit_path(sde_spec, sde_regime)
    limit = ctx.fast_limit(sde_recipe, sde_path, mc.n_limit_paths, times)
    ctx.monitor.stage("limit-mc", paths=int(limit.path_ids.size), refactorizations=limit.refactorizations)
    limit_at = {t: limit_sample(limit, j) for j, t in enumerate(times)}
    ctx.persist_limit_path(sde_path, "sde")
    ctx.persist_fluctuations(limit, sde_spec.grid, "fast_limit")

    finest: Dict[str, object] = {}

    def simulate(spec, regime, path_ids):
        return ctx.simulate(ctx.recipe(regime.dt), len(path_ids), snapshot_count=mc.stride,
                            extra_steps=snapshot_steps(times, regime.dt))

    def on_level(spec, regime, path, batch):
        finest.update(spec=spec, regime=regime, path=path, batch=batch)
        ctx.persist_discrete(batch, f"dt{regime.dt:g}")
        ctx.monitor.stage(f"dt={regime.dt:g}", paths=batch.size, aborted=int(batch.aborted.sum()))

    rows = convergence_sweep(
        cfg.model,
        cfg.scaling,
        exp.dt_levels,
        mc.paths,
        ctx.seed,
        exp.solver_dt,
        simulate=simulate,
        limit_marginals=limit_at[times[-1]],
        half_width=cfg.grid.half_width,
        on_level=on_level,
        interpolation=exp.interpolation,
    )
    ctx.storage.write_table(levels_frame(rows), "levels.csv")

    criteria: List[CriterionResult] = []
    marginals = finest_marginals(ctx, finest, limit_at, times, KS_LEVEL, criteria)
    if marginals:
        ctx.storage.write_table(marginals_frame(marginals), "marginals.csv")
        final = marginals[-1]
        zb_ks = final.ks[0]
        criteria.append(criterion("KS Z^B(T) below 1% critical value", zb_ks.passed, zb_ks.statistic, zb_ks.critical,
                                  note="lattice-matched" if zb_ks.lattice_matched else ""))
        if final.lattice is not None:
            criteria.append(criterion("tick lattice preflight", final.lattice.passed, final.lattice.cdf_spacing,
                                      final.lattice.critical / 4.0))
        criteria.extend(_variance_criteria(final))
    criteria.append(criterion("KS Z^B(T) decreasing across levels", is_decreasing([r.ks_zb for r in rows], strict=False),
                              rows[-1].ks_zb, diagnostic=True))

    ou = _ou_consistency(ctx, sde_recipe, sde_path)
    ctx.storage.write_table(ou, "ou_consistency.csv")
    ratios = ou["ratio"].dropna().to_numpy()
    lo, hi = OU_RATIO_BAND
    criteria.append(criterion("OU gap halves with dt_sde", bool(ratios.size and np.all((ratios >= lo) & (ratios <= hi))),
                              float(ratios.min()) if ratios.size else None, lo))

    criteria.append(criterion("noise kernel PSD projection delta", limit.projection_delta < PROJECTION_TOL,
                              limit.projection_delta, PROJECTION_TOL))
    criteria.append(criterion("noise kernel variances without clamping", limit.clamped_cells == 0,
                              limit.clamped_cells, 0))

    return ctx.report(
        criteria,
        levels=rows,
        marginals=marginals,
        diagnostics={
            "refactorizations": float(limit.refactorizations),
            "ou_gap_finest": float(ou["median_gap"].iloc[-1]),
            "sde_cells": float(sde_spec.grid.n_cells),
        },
    )


def _variance_criteria(final: MarginalReport) -> List[CriterionResult]:
    out = []
    for mom in final.moments:
        if mom.name not in VARIANCE_TESTS:
            continue
        rel = abs(mom.var_discrete - mom.var_limit) / max(abs(mom.var_limit), 1e-300)
        out.append(criterion(f"Var<Z^u(T), {mom.name}> within 10%", rel <= VARIANCE_TOL, rel, VARIANCE_TOL))
    return out


def _ou_consistency(ctx: ExperimentContext, recipe, limit_path) -> pd.DataFrame:
    """
    共享噪声的加密：第 ℓ 层步长 dt_sde/2^ℓ，每步噪声由最细层的 2^{L-1-ℓ} 个增量合成
    """
    exp = ctx.config.experiment
    horizon = ctx.config.scaling.horizon
    levels = exp.refinement_levels
    records = []
    previous: Optional[float] = None
    for level in range(levels):
        dt_sde = exp.dt_sde / 2 ** level
        result = ctx.fast_limit(recipe, limit_path, exp.equivalence_paths, [horizon], dt_sde=dt_sde,
                                substeps=2 ** (levels - 1 - level))
        gap = float(np.median(result.ou_gap))
        records.append({
            "level": level,
            "dt_sde": dt_sde,
            "median_gap": gap,
            "ratio": previous / gap if previous is not None and gap > 0 else np.nan,
        })
        previous = gap
        ctx.monitor.stage(f"ou-level-{level}", dt_sde=dt_sde, median_gap=gap)
    return pd.DataFrame(records)
