import numpy as np
import pytest

from gridfit import io
from gridfit.corpus import load_feeder
from gridfit.estimator import EstimatorConfig
from gridfit.synthlab import ScenarioConfig, perturb_parameters


@pytest.mark.parametrize("name", ["four_node", "ieee37_like"])
def test_feeder_round_trip(tmp_path, name):
    model, _ = load_feeder(name)
    io.write_feeder(tmp_path / "f.json", model)
    back = io.read_feeder(tmp_path / "f.json")
    assert back.nodes == model.nodes and back.loads == model.loads
    assert np.allclose(back.params_vector(), model.params_vector(), rtol=1e-15)


def test_dataset_round_trip(tmp_path, small_scenario):
    model, sc = small_scenario
    io.write_meters(tmp_path / "m.csv", model, sc.data)
    io.write_source(tmp_path / "s.csv", model, sc.data.source)
    back = io.read_dataset(model, tmp_path / "m.csv", tmp_path / "s.csv")
    assert np.allclose(back.p, sc.data.p, rtol=1e-14, atol=1e-16)
    assert np.allclose(back.v, sc.data.v, rtol=1e-14)
    assert np.allclose(back.source, sc.data.source, rtol=1e-13, atol=1e-14)


def test_params_round_trip(tmp_path):
    model, _ = load_feeder("eight_node")
    w = perturb_parameters(model.params_vector(), 0.5, 2)
    io.write_params(tmp_path / "p.csv", model, w)
    assert np.allclose(io.read_params(tmp_path / "p.csv", model), w, rtol=1e-15)


def test_config_round_trip_and_typos():
    cfg = EstimatorConfig(max_epochs=7, rng_seed=3)
    assert io.config_from_dict(EstimatorConfig, io.config_to_dict(cfg)) == cfg
    sc = ScenarioConfig(T=12, meter_class=0.1)
    assert io.config_from_dict(ScenarioConfig, io.config_to_dict(sc)) == sc
    with pytest.raises(ValueError):
        io.config_from_dict(EstimatorConfig, {"max_epoch": 3})


def test_manifest_hashes(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text("x")
    man = io.manifest("synth", {}, {"a": a}, seed=1)
    assert man["outputs"]["a"]["sha256"] == io.file_hash(a)
    assert man["seed"] == 1


def test_fmt_has_seventeen_digits():
    assert float(io.fmt(0.1 + 0.2)) == 0.1 + 0.2
