import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfit.corpus import FEEDERS, load_feeder
from gridfit.data import FLAT_START, TimeSeriesSet
from gridfit.errors import NotConverged, ZeroVoltage
from gridfit.forward import (
    MeterMap, Problem, SolverConfig, error_terms, forward_solve, loss, meter_output, power_mismatch,
    solve_fixed_point, transition_step,
)
from gridfit.netmodel import FeederModel, Line, LineParameters, LoadSpec, assemble_admittance, injections_from_meters
from gridfit.synthlab import newton_oracle


def _peak_injections(model, peak, scale=1.0):
    p = np.asarray(peak) / model.s_base * scale
    return injections_from_meters(model, p, 0.3 * p)


def test_zero_injection_reproduces_source():
    model, _ = load_feeder("eight_node")
    u0 = 1.01 * FLAT_START
    u = forward_solve(model, model.params_vector(), np.zeros((model.n_state, 3), complex), u0)
    assert np.allclose(u, u0, atol=1e-14)


def test_two_node_matches_newton():
    model, peak = load_feeder("two_node")
    s = _peak_injections(model, peak)
    u = forward_solve(model, model.params_vector(), s, FLAT_START)
    ref = newton_oracle(model, model.params_vector(), s, FLAT_START)
    assert np.max(np.abs(u - ref)) < 1e-8


def test_thirteen_bus_peak_residual():
    model, peak = load_feeder("ieee13_like")
    cache = assemble_admittance(model)
    s = _peak_injections(model, peak)[None]
    u, _ = solve_fixed_point(cache, s, FLAT_START[None])
    assert np.max(np.abs(power_mismatch(cache, s, u, FLAT_START[None]))) < 1e-8


@pytest.mark.parametrize("name", sorted(FEEDERS))
def test_forward_is_deterministic(name):
    model, peak = load_feeder(name)
    s = _peak_injections(model, peak, 0.7)
    a = forward_solve(model, model.params_vector(), s, FLAT_START)
    b = forward_solve(model, model.params_vector(), s, FLAT_START)
    assert np.array_equal(a, b)


def test_transition_step_keeps_fixed_point():
    model, peak = load_feeder("four_node")
    cache = assemble_admittance(model)
    s = _peak_injections(model, peak)[None]
    u, _ = solve_fixed_point(cache, s, FLAT_START[None])
    assert np.allclose(transition_step(u, s, FLAT_START[None], cache), u, atol=1e-9)
    flat = np.broadcast_to(FLAT_START, u.shape).copy()
    zero = np.zeros_like(s)
    assert np.allclose(transition_step(flat, zero, FLAT_START[None], cache), flat, atol=1e-14)


@given(st.integers(0, 2**32 - 1))
def test_transition_step_matches_direct_evaluation(seed):
    rng = np.random.default_rng(seed)
    model, _ = load_feeder("four_node")
    cache = assemble_admittance(model)
    n = model.n_state
    u = FLAT_START * (1 + 0.05 * (rng.standard_normal((1, n, 3)) + 1j * rng.standard_normal((1, n, 3))))
    s = 0.02 * (rng.standard_normal((1, n, 3)) + 1j * rng.standard_normal((1, n, 3)))
    u0 = FLAT_START[None]
    full = np.concatenate([u0[0], u[0].ravel()])
    ybus = np.zeros((3 * (n + 1), 3 * (n + 1)), complex)
    idx = {nd: i for i, nd in enumerate(model.nodes)}
    for li, ln in enumerate(model.lines):
        y = cache.y_line[li]
        a, b = 3 * idx[ln.from_node], 3 * idx[ln.to_node]
        ybus[a:a + 3, a:a + 3] += y
        ybus[b:b + 3, b:b + 3] += y
        ybus[a:a + 3, b:b + 3] -= y
        ybus[b:b + 3, a:a + 3] -= y
    expected = np.empty((n, 3), complex)
    for k in range(n):
        r = slice(3 * (k + 1), 3 * (k + 2))
        yself = ybus[r, r]
        coupling = -(ybus[r] @ full - yself @ full[r])
        expected[k] = np.linalg.solve(yself, np.conj(s[0, k]) / np.conj(u[0, k]) + coupling)
    assert np.allclose(transition_step(u, s, u0, cache)[0], expected, atol=1e-10)


def test_transition_step_zero_voltage():
    model, _ = load_feeder("two_node")
    cache = assemble_admittance(model)
    u = np.zeros((1, 1, 3), complex)
    with pytest.raises(ZeroVoltage):
        transition_step(u, u, FLAT_START[None], cache)


def test_not_converged_when_capped():
    model, peak = load_feeder("four_node")
    with pytest.raises(NotConverged):
        forward_solve(model, model.params_vector(), _peak_injections(model, peak), FLAT_START, SolverConfig(max_iter=3))


def test_balanced_symmetry():
    z = (0.01, 0.002, 0.002, 0.01, 0.002, 0.01)
    lp = LineParameters(z, tuple(2 * v for v in z))
    model = FeederModel(
        ("s", "a", "b"),
        (Line("1", "s", "a", lp), Line("2", "a", "b", lp)),
        (LoadSpec("l", "b", "ABC"),),
    )
    s = injections_from_meters(model, np.array([0.3]), np.array([0.1]))
    u = forward_solve(model, model.params_vector(), s, FLAT_START)
    mags = np.abs(u)
    assert np.allclose(mags, mags[:, :1], atol=1e-10)


def test_meter_output_examples():
    ld_an, ld_ab = LoadSpec("a", "n", "AN"), LoadSpec("b", "n", "AB")
    assert meter_output(np.array([1.0 + 0j, 0, 0]), ld_an) == 1.0
    assert np.isclose(meter_output(FLAT_START, ld_ab), np.sqrt(3), atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_meter_output_squared_sum(seed):
    u = np.random.default_rng(seed).standard_normal(6)
    u = u[:3] + 1j * u[3:]
    ld = LoadSpec("c", "n", "BC")
    expected = (u.real[1] - u.real[2]) ** 2 + (u.imag[1] - u.imag[2]) ** 2
    assert np.isclose(meter_output(u, ld) ** 2, expected, rtol=1e-14)


def test_loss_examples(small_scenario):
    model, sc = small_scenario
    problem = Problem(model, sc.data)
    w = model.params_vector()
    assert loss(problem, w, np.arange(1, 6)) < 1e-18

    one = FeederModel(("s", "n"), (Line("1", "s", "n", LineParameters((0.01, 0, 0, 0.01, 0, 0.01), (0.01, 0, 0, 0.01, 0, 0.01))),), (LoadSpec("m", "n", "AN"),))
    src = np.tile(FLAT_START, (2, 1))
    data = TimeSeriesSet(p=np.zeros((2, 1)), q=np.zeros((2, 1)), v=np.array([[1.0], [1.01]]), source=src)
    assert np.isclose(loss(Problem(one, data), one.params_vector(), [1]), 1e-4, rtol=1e-12)


def test_batch_losses_average_to_full(small_scenario):
    model, sc = small_scenario
    data = TimeSeriesSet(p=sc.data.p, q=sc.data.q, v=sc.data.v * 1.001 + 0.001 * np.sin(np.arange(sc.data.T + 1))[:, None], source=sc.data.source)
    problem = Problem(model, data)
    w = model.params_vector() * 1.1
    full = loss(problem, w, data.full_batch)
    parts = np.array_split(data.full_batch, 4)
    weighted = sum(len(b) * loss(problem, w, b) for b in parts) / data.T
    assert abs(weighted - full) < 1e-14


def test_solver_error_reports_instant(small_scenario):
    model, sc = small_scenario
    problem = Problem(model, sc.data, SolverConfig(max_iter=2))
    with pytest.raises(NotConverged) as info:
        error_terms(problem, assemble_admittance(model), [7])
    assert info.value.t in (6, 7)


@pytest.mark.parametrize("bad", [dict(eps_forward=0), dict(max_iter=0), dict(damping=0)])
def test_solver_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)


def test_outputs_positive_at_converged_state(small_scenario):
    model, sc = small_scenario
    problem = Problem(model, sc.data)
    u = problem.solve(assemble_admittance(model), np.arange(5))
    assert np.all(MeterMap.from_model(model).outputs(u) > 0)
