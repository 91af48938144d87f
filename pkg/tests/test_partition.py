import numpy as np
import pytest

from gridfit.corpus import load_feeder
from gridfit.errors import InvalidCut, MissingQuasiSourceData
from gridfit.estimator import EstimatorConfig, sgd_estimate
from gridfit.forward import Problem
from gridfit.gradengine import loss_and_gradient
from gridfit.partition import (
    merge_estimates, partition_network, partitioned_estimate, sub_parameters, subnetwork_data, worker_count,
)
from gridfit.synthlab import perturb_parameters

from conftest import subnetwork_voltage_errors


def _estimate_epoch(model, data, w):
    return sgd_estimate(data, model, w, cfg=EstimatorConfig(max_epochs=1))


def test_three_way_structure(feeder37):
    model, _, plan, *_ = feeder37
    subs = plan.subnetworks
    assert len(subs) == 3
    by_source = {s.source: s for s in subs}
    assert set(by_source) == {"799", "702", "708"}
    assert by_source["799"].pseudo_nodes == ("702",)
    assert by_source["708"].pseudo_nodes == ()
    assert not by_source["799"].quasi_sourced
    nodes = set()
    for s in subs:
        nodes |= set(s.model.nodes)
    assert nodes == set(model.nodes)


def test_line_ownership_counts(feeder37):
    model, _, plan, *_ = feeder37
    # each cut line moves into exactly one downstream piece, so nothing is lost or doubled
    assert sum(len(s.lines) for s in plan.subnetworks) == model.n_lines
    owner = plan.owner()
    for li in plan.cut_edges:
        sub = plan.subnetworks[owner[li]]
        assert sub.cut_line == li


def test_empty_cut_is_identity():
    model, _ = load_feeder("ieee13_like")
    plan = partition_network(model, [])
    (sub,) = plan.subnetworks
    assert sub.model.nodes == model.nodes and sub.lines == tuple(range(model.n_lines))


def test_merge_round_trip(feeder37):
    model, _, plan, *_ = feeder37
    w = perturb_parameters(model.params_vector(), 0.5, 1)
    assert np.array_equal(merge_estimates(plan, [sub_parameters(s, w) for s in plan.subnetworks]), w)
    single = partition_network(model, [])
    assert np.array_equal(merge_estimates(single, [w]), w)


def test_merge_rejects_wrong_shapes(feeder37):
    _, _, plan, *_ = feeder37
    with pytest.raises(ValueError):
        merge_estimates(plan, [np.zeros(12)])


def test_invalid_cuts():
    model, _ = load_feeder("ieee37_like")
    with pytest.raises(InvalidCut):
        partition_network(model, [("702", "799")])
    with pytest.raises(InvalidCut):
        partition_network(model, ["no-such-line"])


def test_cut_forms_are_equivalent():
    model, _ = load_feeder("ieee37_like")
    by_pair = partition_network(model, [("702", "703")])
    li = by_pair.cut_edges[0]
    assert partition_network(model, [li]).cut_edges == (li,)
    assert partition_network(model, [model.lines[li].name, ("703", "702")]).cut_edges == (li,)


def test_missing_quasi_source_data(feeder37):
    _, data, plan, _, quasi, _ = feeder37
    partial = dict(quasi)
    partial.pop(plan.cut_edges[0])
    with pytest.raises(MissingQuasiSourceData):
        subnetwork_data(plan, data, partial)


def test_subnetworks_reproduce_whole_network(feeder37):
    _, _, plan, u, _, sub_data = feeder37
    assert max(subnetwork_voltage_errors(plan, sub_data, u)) < 1e-8


def test_zero_gradient_at_truth(feeder37):
    _, _, plan, _, _, sub_data = feeder37
    for sub, data in zip(plan.subnetworks, sub_data):
        res = loss_and_gradient(Problem(sub.model, data), sub.model.params_vector(), data.full_batch)
        assert np.linalg.norm(res.grad) < 1e-9


def test_parallel_matches_serial(feeder37):
    model, _, plan, _, _, sub_data = feeder37
    w0 = perturb_parameters(model.params_vector(), 0.3, 2)
    a, _ = partitioned_estimate(plan, sub_data, w0, _estimate_epoch, workers=1)
    b, _ = partitioned_estimate(plan, sub_data, w0, _estimate_epoch, workers=3)
    assert np.array_equal(a, b)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("GRIDFIT_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.delenv("GRIDFIT_THREADS")
    assert worker_count() >= 1
