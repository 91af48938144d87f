import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridfit.corpus import load_feeder
from gridfit.synthlab import ScenarioConfig, generate_scenario

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_complex(rng, n=3, scale=1.0):
    return scale * (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))


def well_conditioned(rng, n=3):
    """Random complex matrix with a comfortably invertible real part and Schur complement."""
    a = rng.standard_normal((n, n)) * 0.3 + np.eye(n) * 2.0
    b = rng.standard_normal((n, n)) * 0.3
    return a + 1j * b


@pytest.fixture(scope="session")
def small_scenario():
    """Four-node feeder, 40 noiseless instants, nominal allocation."""
    model, peak = load_feeder("four_node")
    sc = generate_scenario(model, model.params_vector(), peak, ScenarioConfig(T=40, unbalance_target=None))
    return model, sc


@pytest.fixture(scope="session")
def eight_scenario():
    model, peak = load_feeder("eight_node")
    sc = generate_scenario(model, model.params_vector(), peak, ScenarioConfig(T=40, unbalance_target=None))
    return model, sc


def subnetwork_voltage_errors(plan, sub_data, u_full, solver=None):
    """Worst voltage error of each sub-network solve against the whole-network one.

    Whole-network voltages are rotated so the sub-network source has phase a
    at zero angle, matching the convention of the quasi-source phasors.
    """
    from gridfit.forward import DEFAULT_SOLVER, Problem
    from gridfit.netmodel import assemble_admittance
    from gridfit.partition import rotate_to_reference

    solver = DEFAULT_SOLVER if solver is None else solver
    full_idx = plan.model.state_index
    errs = []
    for sub, data in zip(plan.subnetworks, sub_data):
        problem = Problem(sub.model, data, solver)
        u_sub = problem.solve(assemble_admittance(sub.model), np.arange(data.T + 1))
        src = data.source if not sub.quasi_sourced else u_full[:, full_idx[sub.source]]
        ref = rotate_to_reference(u_full, src)
        cols = [full_idx[n] for n in sub.model.nodes if n != sub.source]
        order = [sub.model.state_index[n] for n in sub.model.nodes if n != sub.source]
        errs.append(float(np.max(np.abs(u_sub[:, order] - ref[:, cols]))))
    return errs


@pytest.fixture(scope="session")
def feeder37():
    from gridfit.forward import Problem
    from gridfit.netmodel import assemble_admittance
    from gridfit.partition import partition_network, quasi_source_series, subnetwork_data

    model, peak = load_feeder("ieee37_like")
    w = model.params_vector()
    data = generate_scenario(model, w, peak, ScenarioConfig(T=24, unbalance_target=None)).data
    plan = partition_network(model, [("702", "703"), ("708", "733")])
    full = Problem(model, data)
    u = full.solve(assemble_admittance(model), np.arange(data.T + 1))
    quasi = quasi_source_series(plan, w, u, data.source)
    return model, data, plan, u, quasi, subnetwork_data(plan, data, quasi)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
