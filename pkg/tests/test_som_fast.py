import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from app.core.grid import Grid, GridFunction, derivative, inner_product
from app.core.scaling import Regime, ScalingRegime
from app.service.fom_solver import solve_first_order
from app.service.som_fast import (
    FastFluctuationSolver,
    FastLimitState,
    NoiseKernel,
    drift_vol_price,
    ou_step,
    sigma_phi,
    step_fast,
    zy_ou_reference,
)

from tests.conftest import constant_spec

FAST = ScalingRegime(dt=0.0625, alpha=0.75, beta=0.5, regime=Regime.FAST)


def _solver(spec, dt_sde=0.05, substeps=1):
    path = solve_first_order(spec, FAST, solver_dt=0.1)
    return FastFluctuationSolver(spec, FAST, path, dt_sde=dt_sde, substeps=substeps)


def test_symmetric_intensities_give_unit_volatility():
    spec = constant_spec(FAST, tick=0.25, p_a=0.5, p_b=0.5, p_diff=0.0)
    assert drift_vol_price(0.0, spec) == (0.0, 1.0)


def test_no_price_events_no_price_noise():
    spec = constant_spec(FAST, tick=0.25, p_diff=0.0)
    mu, sigma = drift_vol_price(0.3, spec)
    assert sigma == 0.0


def test_structured_square_root_reproduces_covariance():
    grid = Grid.symmetric(0.5, 2.0)
    rng = np.random.default_rng(0)
    g = rng.uniform(0.5, 2.0, grid.n_cells)
    f = rng.uniform(-0.3, 0.3, grid.n_cells)
    kernel = NoiseKernel(grid, g, f)
    np.testing.assert_allclose(kernel.dense(), kernel.raw_dense(), atol=1e-12)
    assert kernel.projection_delta == 0.0
    assert kernel.clamped_cells.size == 0
    z = rng.standard_normal((4, grid.n_cells))
    np.testing.assert_allclose(kernel.sample(z), z @ kernel.sqrt_factor().T, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    g=arrays(np.float64, 7, elements=st.floats(min_value=0.0, max_value=4.0)),
    f=arrays(np.float64, 7, elements=st.floats(min_value=-3.0, max_value=3.0)),
)
def test_projected_kernel_is_psd(g, f):
    grid = Grid.symmetric(1.0, 3.0)
    kernel = NoiseKernel(grid, g, f)
    eigen = np.linalg.eigvalsh(kernel.dense())
    assert eigen.min() >= -1e-10 * max(1.0, float(g.max()))
    assert kernel.projection_delta >= 0.0


def test_violated_variance_inequality_is_projected():
    grid = Grid.symmetric(1.0, 2.0)
    g = np.ones(grid.n_cells)
    f = np.full(grid.n_cells, 2.0)
    kernel = NoiseKernel(grid, g, f)
    assert kernel.projection_delta > 0.0
    assert kernel.clamped_cells.size == grid.n_cells
    np.testing.assert_array_equal(kernel.diagonal(), 0.0)


def test_sigma_phi_on_cell_indicator_matches_kernel_diagonal():
    spec = constant_spec(FAST, tick=0.25, p_diff=0.0, omega=1.5)
    kernel = NoiseKernel.at(spec, 0.0)
    grid = spec.grid
    for j in (-3, 0, 2):
        e = grid.zeros()
        e.values[grid.position(j)] = 1.0 / math.sqrt(grid.tick)
        assert sigma_phi(e, 0.0, spec) ** 2 == pytest.approx(kernel.diagonal()[grid.position(j)], abs=1e-12)


def test_exponential_integrator_is_exact_for_constant_coefficients():
    rate, d0, dt, steps = -0.7, 0.3, 1e-3, 1000
    zy = np.zeros(1)
    for _ in range(steps):
        zy = ou_step(zy, rate, np.array([d0 * dt]), dt)
    exact = d0 * math.expm1(rate * dt * steps) / rate
    assert zy[0] == pytest.approx(exact, abs=1e-8)
    assert ou_step(np.array([2.0]), 0.0, np.array([0.5]), 0.1)[0] == 2.5


def test_price_fluctuation_is_brownian():
    spec = constant_spec(FAST, tick=0.25, p_a=0.5, p_b=0.5, p_diff=0.0, omega=0.0)
    result = _solver(spec).run(master_seed=3, path_ids=range(10_000), record_times=[1.0])
    var = float(np.var(result.ZB[:, -1]))
    assert var == pytest.approx(1.0, rel=0.05)


def test_deterministic_drift_without_price_noise():
    spec = constant_spec(FAST, tick=0.25, p_diff=0.3, omega=0.0)
    result = _solver(spec).run(master_seed=1, path_ids=range(5), record_times=[0.5, 1.0])
    np.testing.assert_allclose(result.ZB[:, 0], 0.15, atol=1e-12)
    np.testing.assert_allclose(result.ZB[:, 1], 0.3, atol=1e-12)
    # u 不随时间变化且没有 M：⟨Z^u_t, h⟩ = Z^B_t·⟨∂_x u0, h⟩
    slope = inner_product(derivative(spec.u0), spec.h)
    np.testing.assert_allclose(result.ZY[:, 1], 0.3 * slope, atol=1e-12)


def test_grid_zy_matches_scalar_ou_when_rate_vanishes():
    spec = constant_spec(FAST, tick=0.25, p_a=0.5, p_b=0.5, p_diff=0.1, omega=1.0)
    result = _solver(spec).run(master_seed=2, path_ids=range(20), record_times=[1.0])
    assert float(result.ou_gap.max()) < 1e-10
    np.testing.assert_allclose(result.ZY[:, -1], result.ZY_ou[:, -1], atol=1e-10)


def test_results_independent_of_batch_split():
    spec = constant_spec(FAST, tick=0.25, p_a=0.5, p_b=0.5, p_diff=0.1, omega=1.0)
    tests = {"block": GridFunction(spec.grid, spec.u0.values)}
    whole = _solver(spec).run(7, [0, 1, 2], [1.0], test_functions=tests)
    part = _solver(spec).run(7, [2], [1.0], test_functions=tests)
    np.testing.assert_array_equal(whole.ZB[2:], part.ZB)
    np.testing.assert_array_equal(whole.pairings["block"][2:], part.pairings["block"])


def test_shared_noise_substeps_keep_scale():
    spec = constant_spec(FAST, tick=0.25, p_a=0.5, p_b=0.5, p_diff=0.0, omega=0.0)
    coarse = _solver(spec, dt_sde=0.1, substeps=2).run(5, range(4000), [1.0])
    assert float(np.var(coarse.ZB[:, -1])) == pytest.approx(1.0, rel=0.08)


def test_single_path_step():
    spec = constant_spec(FAST, tick=0.25, p_a=0.5, p_b=0.5, p_diff=0.0, omega=1.0)
    path = solve_first_order(spec, FAST, solver_dt=0.1)
    state = FastLimitState.zero(spec.grid)
    nxt = step_fast(state, path.state_at(0.0), spec, 0.01, np.random.default_rng(0))
    assert nxt.t == pytest.approx(0.01)
    assert nxt.ZY == pytest.approx(spec.grid.tick * float(np.dot(nxt.Zu.values, spec.h.values)))


def test_scalar_reference_accumulates_drive_without_feedback():
    spec = constant_spec(FAST, tick=0.25, p_a=0.5, p_b=0.5, p_diff=0.0)
    path = solve_first_order(spec, FAST, solver_dt=0.1)
    drive = [0.1, -0.3, 0.25, 0.05]
    np.testing.assert_allclose(zy_ou_reference(path, spec, drive, 0.25), np.concatenate([[0.0], np.cumsum(drive)]),
                               atol=1e-15)
