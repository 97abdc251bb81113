import numpy as np
import pytest

from app.core.scaling import Regime
from app.schema.run_config import ScalingConfig
from app.service.fom_solver import solve_first_order
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

from tests.conftest import constant_config


def _recipe(regime: Regime, alpha: float, beta: float, **model) -> ModelRecipe:
    scaling = ScalingConfig(dt=0.0625, alpha=alpha, beta=beta, regime=regime)
    return ModelRecipe(model=constant_config(**model), scaling=scaling, dt=0.0625, half_width=6.0)


def test_batches_cover_all_paths():
    pool = PathPool(parallelism=1, batch_size=3)
    assert pool.batches(7) == [[0, 1, 2], [3, 4, 5], [6]]
    assert pool.batches(2, offset=10) == [[10, 11]]


def test_inline_map_keeps_order_and_reports():
    seen = []
    pool = PathPool(parallelism=1, on_result=seen.append)
    assert pool.map(lambda x: x * x, [3, 1, 2]) == [9, 1, 4]
    assert seen == [9, 1, 4]


def test_recipe_build_is_cached():
    recipe = _recipe(Regime.SLOW, 0.25, 0.75, p_a=0.5, p_b=0.5)
    spec, regime = recipe.build()
    again, _ = ModelRecipe(**recipe.__dict__).build()
    assert again is spec
    assert spec.grid.tick == pytest.approx(regime.dx)


def test_merged_discrete_batches_match_single_run():
    recipe = _recipe(Regime.SLOW, 0.25, 0.75, p_a=0.5, p_b=0.5)
    whole = run_discrete(DiscreteTask(recipe=recipe, seed=3, path_ids=[0, 1, 2, 3], snapshot_count=4))
    pool = PathPool(parallelism=1, batch_size=2)
    tasks = [DiscreteTask(recipe=recipe, seed=3, path_ids=ids, snapshot_count=4) for ids in pool.batches(4)]
    merged = merge_discrete(pool.map(run_discrete, tasks))
    np.testing.assert_array_equal(merged.path_ids, whole.path_ids)
    np.testing.assert_array_equal(merged.B, whole.B)
    for name in whole.pairings:
        np.testing.assert_array_equal(merged.pairings[name], whole.pairings[name])


def test_merged_limit_batches():
    fast = _recipe(Regime.FAST, 0.75, 0.5, p_a=0.5, p_b=0.5, p_diff=0.0)
    spec, regime = fast.build()
    path = solve_first_order(spec, regime, 0.1)
    parts = [run_fast(FastTask(recipe=fast, limit_path=path, seed=1, path_ids=ids, record_times=(1.0,), dt_sde=0.1))
             for ids in ([0, 1], [2])]
    merged = merge_fast(parts)
    assert merged.ZB.shape == (3, 1)
    assert set(merged.pairings) == set(parts[0].pairings)

    slow = _recipe(Regime.SLOW, 0.25, 0.75, p_a=0.5, p_b=0.5)
    spec, regime = slow.build()
    path = solve_first_order(spec, regime, 0.1)
    parts = [run_slow(SlowTask(recipe=slow, limit_path=path, seed=1, path_ids=ids, record_times=(0.5, 1.0),
                               dt_sde=0.1, volterra_check=True))
             for ids in ([0], [1, 2])]
    merged = merge_slow(parts)
    assert merged.ZY.shape == (3, 2)
    assert set(merged.volterra_pairings) == set(merged.pairings)


def test_terminal_volume_fluctuation_kept_on_request():
    slow = _recipe(Regime.SLOW, 0.25, 0.75, p_a=0.5, p_b=0.5)
    spec, regime = slow.build()
    path = solve_first_order(spec, regime, 0.1)
    parts = [run_slow(SlowTask(recipe=slow, limit_path=path, seed=1, path_ids=ids, record_times=(1.0,),
                               dt_sde=0.1, keep_terminal=True))
             for ids in ([0], [1, 2])]
    assert merge_slow(parts).terminal_zu.shape == (3, spec.grid.n_cells)
    plain = run_slow(SlowTask(recipe=slow, limit_path=path, seed=1, path_ids=[0], record_times=(1.0,), dt_sde=0.1))
    assert plain.terminal_zu is None

    fast = _recipe(Regime.FAST, 0.75, 0.5, p_a=0.5, p_b=0.5, p_diff=0.0)
    spec, regime = fast.build()
    path = solve_first_order(spec, regime, 0.1)
    result = run_fast(FastTask(recipe=fast, limit_path=path, seed=1, path_ids=[0, 1], record_times=(1.0,),
                               dt_sde=0.1, keep_terminal=True))
    assert result.terminal_zu.shape == (2, spec.grid.n_cells)
