import json

import numpy as np
import pytest

from gridfit import io
from gridfit.cli import main
from gridfit.corpus import load_feeder
from gridfit.evaluation import read_reports


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    cfg = out / "scenario.json"
    cfg.write_text(json.dumps({"unbalance_target": None}))
    assert main(["synth", "--feeder", "four_node", "--config", str(cfg), "--T", "48", "--seed", "2", "--out", str(out)]) == 0
    return out


def _args(d):
    return ["--feeder", str(d / "feeder.json"), "--meters", str(d / "meters.csv"), "--source", str(d / "source.csv")]


def test_synth_writes_files_and_is_deterministic(synth_dir, tmp_path):
    man = json.loads((synth_dir / "manifest.json").read_text())
    assert set(man["outputs"]) == {"feeder", "meters", "source"}
    assert man["seed"] == 2 and man["config"]["meter_class"] == 0.0
    cfg = synth_dir / "scenario.json"
    assert main(["synth", "--feeder", "four_node", "--config", str(cfg), "--T", "48", "--seed", "2", "--out", str(tmp_path)]) == 0
    for name in ("feeder.json", "meters.csv", "source.csv"):
        assert io.file_hash(tmp_path / name) == io.file_hash(synth_dir / name)


def test_synth_records_meter_class(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"unbalance_target": None}))
    assert main(["synth", "--feeder", "four_node", "--config", str(cfg), "--T", "10", "--meter-class", "0.2", "--seed", "5", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["meter_class"] == 0.2 and man["seed"] == 5


def test_synth_default_feeder(tmp_path):
    assert main(["synth", "--T", "24", "--out", str(tmp_path)]) == 0
    assert io.read_feeder(tmp_path / "feeder.json").nodes == load_feeder("ieee13_like")[0].nodes


def test_gradcheck_pass_and_negative_control(synth_dir, tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert main(["gradcheck", *_args(synth_dir), "--instants", "10", "--seed", "1", "--out", str(out)]) == 0
    assert "PASS" in capsys.readouterr().out
    rows = out.read_text().splitlines()[1:]
    assert len(rows) == 12 * io.read_feeder(synth_dir / "feeder.json").n_lines
    assert main(["gradcheck", *_args(synth_dir), "--instants", "10", "--seed", "1", "--corrupt-jacobian"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_estimate_from_truth_is_already_optimal(synth_dir, tmp_path):
    cfg = tmp_path / "e.json"
    cfg.write_text(json.dumps({"estimator": {"max_epochs": 1}}))
    code = main(["estimate", *_args(synth_dir), "--config", str(cfg), "--truth", str(synth_dir / "feeder.json"), "--out", str(tmp_path)])
    assert code == 0
    (rep,) = read_reports(tmp_path / "report.csv")
    assert rep.status == "already optimal"


def test_estimate_improves_from_perturbed_start(synth_dir, tmp_path):
    cfg = tmp_path / "e.json"
    cfg.write_text(json.dumps({"estimator": {"max_epochs": 5}, "perturb": {"half_width": 0.3, "seed": 1}}))
    code = main(["estimate", *_args(synth_dir), "--config", str(cfg), "--truth", str(synth_dir / "feeder.json"), "--out", str(tmp_path)])
    assert code == 0
    (rep,) = read_reports(tmp_path / "report.csv")
    assert rep.improvement > 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    for key in ("trace", "w_best", "w_initial", "report"):
        assert key in man["outputs"]
    trace = io.read_trace(tmp_path / "trace.csv")
    assert len(trace) == rep.n_epochs + 1
    assert np.array_equal([r["J_best"] for r in trace], rep.J_history)

    ev = tmp_path / "ev"
    assert main([
        "evaluate", "--truth", str(synth_dir / "feeder.json"), "--initial", str(tmp_path / "w_initial.csv"),
        "--final", str(tmp_path / "w_best.csv"), "--out", str(ev),
    ]) == 0
    (again,) = read_reports(ev / "reports.csv")
    assert np.isclose(again.improvement, rep.improvement, rtol=1e-12)


def test_invalid_cut_exits_nonzero(synth_dir, tmp_path, capsys):
    code = main(["partition-estimate", *_args(synth_dir), "--cut", "n2:n3", "--out", str(tmp_path)])
    assert code == 1
    assert "n2" in capsys.readouterr().err


def test_partition_estimate_without_cuts_fails(synth_dir, tmp_path):
    assert main(["partition-estimate", *_args(synth_dir), "--out", str(tmp_path)]) == 1


def test_partition_estimate_end_to_end(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"unbalance_target": None}))
    d = tmp_path / "d"
    assert main(["synth", "--feeder", "ieee37_like", "--config", str(cfg), "--T", "12", "--cut", "702:703", "--cut", "708:733", "--out", str(d)]) == 0
    ecfg = tmp_path / "e.json"
    ecfg.write_text(json.dumps({"estimator": {"max_epochs": 1}, "partition": {"cut_edges": [["702", "703"], ["708", "733"]]}}))
    out = tmp_path / "o"
    assert main(["partition-estimate", *_args(d), "--config", str(ecfg), "--threads", "1", "--truth", str(d / "feeder.json"), "--out", str(out)]) == 0
    (rep,) = read_reports(out / "report.csv")
    assert rep.status == "already optimal"
    assert {p.name for p in out.glob("trace_*.csv")} == {"trace_799.csv", "trace_702.csv", "trace_708.csv"}


def test_bad_arguments_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["estimate"])
    assert info.value.code == 2
