import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridfit.corpus import FEEDERS, load_feeder
from gridfit.data import FLAT_START
from gridfit.errors import ZeroCurrent
from gridfit.evaluation import madr
from gridfit.netmodel import injections_from_meters
from gridfit.synthlab import (
    ScenarioConfig, bus_admittance, generate_scenario, newton_oracle, oracle_mismatch, perturb_parameters,
    unbalance_level,
)


def test_newton_zero_injection():
    model, _ = load_feeder("four_node")
    u0 = 0.98 * FLAT_START
    u = newton_oracle(model, model.params_vector(), np.zeros((model.n_state, 3), complex), u0)
    assert np.allclose(u, u0, atol=1e-14)


@pytest.mark.parametrize("name", sorted(FEEDERS))
def test_newton_residual(name):
    model, peak = load_feeder(name)
    w = model.params_vector()
    p = np.asarray(peak) / model.s_base
    s = injections_from_meters(model, p, 0.4 * p)
    u = newton_oracle(model, w, s, FLAT_START)
    mis = oracle_mismatch(bus_admittance(model, w), u.reshape(1, -1), FLAT_START[None], s.reshape(1, -1))
    assert np.max(np.abs(mis)) < 1e-10


def test_noiseless_class_stores_clean_voltages(small_scenario):
    _, sc = small_scenario
    assert np.array_equal(sc.data.v, sc.data.v_clean)
    assert np.array_equal(sc.data.p, sc.data.p_clean)


def test_injected_noise_level():
    model, peak = load_feeder("four_node")
    data = generate_scenario(model, model.params_vector(), peak, ScenarioConfig(T=2160, meter_class=0.2, unbalance_target=None)).data
    single = np.array([len(ld.measured_phases) == 1 for ld in model.loads])
    noise = (data.v - data.v_clean)[:, single]
    assert abs(noise.std() / (0.002 / 3) - 1) < 0.1


def test_regeneration_is_bit_identical():
    model, peak = load_feeder("four_node")
    cfg = ScenarioConfig(T=30, meter_class=0.1, unbalance_target=None, rng_seed=9)
    a = generate_scenario(model, model.params_vector(), peak, cfg).data
    b = generate_scenario(model, model.params_vector(), peak, cfg).data
    for f in ("p", "q", "v", "source", "v_clean"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_doubling_loads_deepens_drop():
    model, peak = load_feeder("eight_node")
    w = model.params_vector()
    p = np.asarray(peak) / model.s_base
    drops = []
    for k in (1.0, 2.0):
        s = injections_from_meters(model, k * p, 0.3 * k * p)
        u = newton_oracle(model, w, s, FLAT_START)
        drops.append(np.abs(FLAT_START) - np.abs(u))
    loaded = sorted({model.state_index[ld.node] for ld in model.loads})
    assert np.all(drops[1][loaded].mean(axis=1) > drops[0][loaded].mean(axis=1))


def test_perturbation_examples():
    w = np.linspace(0.1, 1.0, 24)
    assert np.array_equal(perturb_parameters(w, 0.0, 3), w)
    ratio = perturb_parameters(w, 0.5, 3) / w
    assert np.all((ratio >= 0.5) & (ratio <= 1.5))
    mc = np.mean([madr(perturb_parameters(np.ones(120), 0.5, s), np.ones(120)) for s in range(200)])
    assert abs(mc - 25.0) < 0.5
    with pytest.raises(ValueError):
        perturb_parameters(w, 1.0, 0)


@given(st.floats(0.1, 10))
def test_unbalance_balanced_is_zero(level):
    assert unbalance_level(np.full((5, 3), level)) < 1e-15


def test_unbalance_examples():
    assert round(unbalance_level(np.array([[1.1, 1.0, 0.9]])), 4) == 0.0667
    with pytest.raises(ZeroCurrent):
        unbalance_level(np.zeros((1, 3)))


def test_thirteen_bus_unbalance_band():
    model, peak = load_feeder("ieee13_like")
    sc = generate_scenario(model, model.params_vector(), peak, ScenarioConfig(T=240))
    assert 0.03 <= sc.unbalance <= 0.04


@pytest.mark.parametrize("bad", [dict(meter_class=0.5), dict(pf_min=0.0), dict(pf_min=0.95, pf_max=0.9), dict(T=1)])
def test_scenario_config_validation(bad):
    with pytest.raises(ValueError):
        ScenarioConfig(**bad)
