import dataclasses

import numpy as np
import pytest
from scipy import integrate, stats

from app.core.builtin_models import (
    build_model,
    indicator_profile,
    model_factory,
    placement_density,
    placement_quantile,
)
from app.core.exceptions import ConfigurationError, ModelValidityError
from app.core.grid import GridFunction
from app.core.model import check_spec_consistency
from app.schema.run_config import ModelConfig

from tests.conftest import constant_config, constant_spec


def test_indicator_profile_vanishes_on_positive_side():
    h = indicator_profile(1.0)
    x = np.array([-2.0, -1.0, 0.0, 0.5])
    np.testing.assert_allclose(h(x), [8.0 * np.exp(-2.0), np.exp(-1.0), 0.0, 0.0])


@pytest.mark.parametrize("u", [0.01, 0.25, 0.5, 0.9, 0.999])
def test_placement_quantile_inverts_cdf(u):
    width = 10.0
    q = float(placement_quantile(width, np.array([u]))[0])
    mass, _ = integrate.quad(placement_density(width), -width, q)
    assert mass == pytest.approx(u, abs=1e-9)


def test_example_3_10_intensities(slow_regime):
    spec = build_model(ModelConfig(name="example-3-10"), slow_regime)
    pa, pb = spec.intensities(1.0, 0.0)
    assert pa == pytest.approx(0.25)
    assert pa + pb == pytest.approx(1.0)
    assert spec.p_ba(1.0, 0.0) == pytest.approx(0.5)
    assert spec.sigma_b(1.0, 0.0) == pytest.approx(1.0)


def test_example_3_10_partials_match_finite_differences(slow_regime):
    spec = build_model(ModelConfig(name="example-3-10"), slow_regime)
    b, y, step = 1.3, 0.4, 1e-6
    fd_b = (spec.p_ba(b + step, y) - spec.p_ba(b - step, y)) / (2 * step)
    fd_y = (spec.p_ba(b, y + step) - spec.p_ba(b, y - step)) / (2 * step)
    assert spec.pb(b, y) == pytest.approx(float(fd_b), rel=1e-6)
    assert spec.py(b, y) == pytest.approx(float(fd_y), rel=1e-6)


@pytest.mark.parametrize("b, y", [(1.0, 0.0), (0.5, 0.3), (2.0, -1.0)])
def test_example_3_10_partials_closed_form(slow_regime, b, y):
    spec = build_model(ModelConfig(name="example-3-10"), slow_regime)
    # ∂_b 含 1/(1+b) 因子的导数，故分母为 (1+b)²
    assert spec.pb(b, y) == pytest.approx(-2.0 * stats.norm.sf(y) / (1.0 + b) ** 2, abs=1e-12)
    assert spec.py(b, y) == pytest.approx(2.0 * b * stats.norm.pdf(y) / (1.0 + b), abs=1e-12)


def test_example_3_10_always_places_at_zero_volume(slow_regime):
    spec = build_model(ModelConfig(name="example-3-10"), slow_regime)
    rng = np.random.default_rng(7)
    n = 100_000
    omega = spec.omega_sampler(np.ones(n), np.zeros(n), rng.random(n))
    assert np.mean(omega == 1.0) == 1.0


def test_example_3_10_has_no_fast_drift(slow_regime):
    spec = build_model(ModelConfig(name="example-3-10"), slow_regime)
    with pytest.raises(ConfigurationError) as info:
        spec.drift(1.0, 0.0)
    assert info.value.detail["fields"][0]["loc"] == "model.p_diff"


def test_example_fast_drift_scale(fast_regime):
    spec = build_model(ModelConfig(name="example-fast"), fast_regime)
    b, y = 1.0, 0.0
    pa, pb = spec.intensities(b, y)
    eps = fast_regime.dt ** (fast_regime.alpha - 0.5)
    assert (pb - pa) / eps == pytest.approx(spec.drift(b, y), rel=1e-12)
    # 极限强度对称，价格在一阶上不动
    assert spec.p_ba(b, y) == pytest.approx(0.0)


def test_example_fast_symmetric_split(fast_regime):
    spec = build_model(ModelConfig(name="example-fast", drift_split="symmetric"), fast_regime)
    pa, pb = spec.intensities(1.0, 0.5)
    q = spec.drift(1.0, 0.5)
    assert pa + pb == pytest.approx(2.0 * q)


def test_grid_window_covers_bound(slow_regime):
    config = ModelConfig(name="example-3-10")
    grid = model_factory.grid_for(config, slow_regime)
    assert grid.tick == pytest.approx(slow_regime.dx)
    assert grid.half_width >= model_factory.bound_for(config) + config.B0


def test_initial_y_matches_inner_product(slow_regime):
    spec = constant_spec(slow_regime, tick=0.25)
    assert spec.initial_y() == pytest.approx(float(0.25 * np.dot(spec.h.values, spec.u0.values)))


def test_validate_rejects_negative_u0(slow_regime):
    spec = constant_spec(slow_regime, tick=0.25)
    bad = dataclasses.replace(spec, u0=GridFunction(spec.grid, -spec.u0.values))
    with pytest.raises(ModelValidityError):
        bad.validate(slow_regime)


def test_validate_rejects_probability_overflow(first_order_regime):
    with pytest.raises(ModelValidityError) as info:
        constant_spec(first_order_regime, tick=0.25, p_a=10.0, p_b=10.0)
    assert info.value.detail["value"] > 1.0


def test_unknown_model_is_configuration_error(slow_regime):
    config = ModelConfig.model_construct(**{**ModelConfig().model_dump(), "name": "nope"})
    with pytest.raises(ConfigurationError):
        model_factory.build(config, slow_regime)


def test_constant_model_samplers_are_consistent(first_order_regime):
    spec = constant_spec(first_order_regime, tick=0.25)
    report = check_spec_consistency(spec, first_order_regime, b=1.0, y=0.0, draws=20_000,
                                    rng=np.random.default_rng(11))
    assert report.passed


def test_mismatched_density_fails_consistency(first_order_regime):
    spec = constant_spec(first_order_regime, tick=0.25)
    doubled = dataclasses.replace(spec, f_density=lambda b, y, x: 2.0 * spec.f_density(b, y, x))
    report = check_spec_consistency(doubled, first_order_regime, b=1.0, y=0.0, draws=20_000,
                                    rng=np.random.default_rng(11))
    assert not report.passed
    assert report.max_abs_z_f > report.threshold


def test_constant_model_has_constant_price_coefficients(slow_regime):
    spec = constant_spec(slow_regime, tick=0.25, p_a=0.3, p_b=0.5, p_diff=0.2)
    pa, pb = spec.intensities(np.array([0.0, 5.0]), np.array([1.0, -1.0]))
    np.testing.assert_allclose(pa, 0.3)
    np.testing.assert_allclose(pb, 0.5)
    assert spec.drift(2.0, 3.0) == pytest.approx(0.2)
    assert constant_config().name == "constant-test"


def test_discrete_density_scales_by_placement_probability(slow_regime):
    spec = constant_spec(slow_regime, tick=0.25, p_a=0.3, p_b=0.5)
    prob = spec.placement_probability(1.0, 0.0, slow_regime)
    assert prob == pytest.approx(1.0 - slow_regime.dp * 0.8)
    np.testing.assert_allclose(spec.f_discrete(1.0, 0.0, slow_regime).values, prob * spec.f(1.0, 0.0).values)
