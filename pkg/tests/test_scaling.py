import pytest

from app.core.exceptions import ConfigurationError
from app.core.scaling import Regime, ScalingRegime


def _locs(error: ConfigurationError):
    return [f["loc"] for f in error.detail["fields"]]


def test_event_sizes():
    regime = ScalingRegime(dt=1e-4, alpha=0.6, beta=0.8, regime=Regime.FAST)
    assert regime.dv == 1e-4
    assert regime.dx == pytest.approx(1e-4 ** 0.6, rel=1e-14)
    assert regime.dp == pytest.approx(1e-4 ** 0.8, rel=1e-14)
    # 单个 C 事件在一个格子里的增量 Δv/Δx
    assert regime.dv / regime.dx == pytest.approx(1e-4 ** 0.4, rel=1e-12)


def test_event_count_is_floor():
    assert ScalingRegime(dt=1e-3, alpha=0.4, beta=0.6).n_events == 1000
    assert ScalingRegime(dt=0.3, alpha=0.4, beta=0.6).n_events == 3


def test_fast_requires_beta_two_one_minus_alpha():
    with pytest.raises(ConfigurationError) as info:
        ScalingRegime(dt=1e-4, alpha=0.6, beta=0.5, regime=Regime.FAST)
    assert _locs(info.value) == ["scaling.beta"]
    assert info.value.exit_code == 2


def test_slow_requires_alpha_below_half():
    with pytest.raises(ConfigurationError) as info:
        ScalingRegime(dt=1e-4, alpha=0.6, beta=0.4, regime=Regime.SLOW)
    assert "scaling.alpha" in _locs(info.value)


def test_beta_below_one_minus_alpha_rejected():
    with pytest.raises(ConfigurationError) as info:
        ScalingRegime(dt=1e-3, alpha=0.4, beta=0.5, regime=Regime.FIRST_ORDER_ONLY)
    assert _locs(info.value) == ["scaling.beta"]


def test_horizon_shorter_than_one_event_rejected():
    with pytest.raises(ConfigurationError) as info:
        ScalingRegime(dt=2.0, alpha=0.4, beta=0.6, horizon=1.0)
    assert "scaling.dt" in _locs(info.value)


def test_price_moves_only_on_critical_beta():
    assert ScalingRegime(dt=1e-3, alpha=0.4, beta=0.6).price_moves
    assert not ScalingRegime(dt=1e-3, alpha=0.4, beta=0.9).price_moves
    assert not ScalingRegime(dt=1e-3, alpha=0.6, beta=0.8, regime=Regime.FAST).price_moves


def test_rescale_per_regime(fast_regime, slow_regime, first_order_regime):
    assert fast_regime.rescale == fast_regime.dt
    assert slow_regime.rescale == slow_regime.dx
    with pytest.raises(ConfigurationError):
        _ = first_order_regime.rescale


def test_with_dt_keeps_exponents(slow_regime):
    finer = slow_regime.with_dt(1e-3)
    assert (finer.alpha, finer.beta, finer.regime) == (slow_regime.alpha, slow_regime.beta, Regime.SLOW)
    assert finer.time_of(500) == pytest.approx(0.5)


def test_regime_accepts_string_value():
    regime = ScalingRegime(dt=1e-3, alpha=0.4, beta=0.6, regime="slow")
    assert regime.regime is Regime.SLOW
