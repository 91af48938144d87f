"""``gridfit`` command line: synth, estimate, gradcheck, partition-estimate, evaluate."""

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .corpus import FEEDERS, load_feeder
from .errors import GridfitError
from .estimator import BoundBox, EstimatorConfig, PriorModel, sgd_estimate, two_stage_map
from .evaluation import VARIANTS, evaluate, read_reports, write_quantiles, write_reports
from .forward import Problem
from .partition import (
    partition_network, partitioned_estimate, quasi_source_series, subnetwork_data, worker_count,
)
from .synthlab import ScenarioConfig, generate_scenario, newton_oracle, perturb_parameters

log = logging.getLogger("gridfit")


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _load_model(spec):
    """Corpus name or feeder JSON path -> ``(model, nominal peak kW per meter)``."""
    if spec in FEEDERS:
        return load_feeder(spec)
    doc = io.read_json(spec)
    model = io.feeder_from_dict(doc)
    peaks = np.array([float(ld.get("peak_kw", 100.0)) for ld in doc["loads"]])
    return model, peaks


def _parse_cut(text):
    a, sep, b = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"cut edge must look like FROM:TO, got {text!r}")
    return (a, b)


def _config(path):
    return io.read_json(path) if path else {}


def _estimator_config(doc, seed):
    cfg = io.config_from_dict(EstimatorConfig, doc.get("estimator", {}))
    return cfg if seed is None else replace(cfg, rng_seed=seed)


def _prior_bounds(doc, variant, w_initial):
    prior = bounds = None
    if "MAP" in variant:
        p = doc.get("prior", {})
        prior = PriorModel.around(w_initial, p.get("rel_std", 0.5 / 3), p.get("gamma", 1.0))
    if "CON" in variant:
        b = doc.get("bounds", {})
        bounds = BoundBox.around(w_initial, b.get("lower", 2 / 3), b.get("upper", 2.0))
    return prior, bounds


def _run_estimator(variant, data, model, w0, cfg, prior, bounds, callback=None):
    if "MAP" in variant:
        w, (tr1, tr2) = two_stage_map(data, model, w0, bounds, cfg, prior, callback)
        return w, tr2, (tr1, tr2)
    w, tr = sgd_estimate(data, model, w0, None, bounds, cfg, callback)
    return w, tr, (tr,)


class _SubJob:
    """Picklable per-sub-network estimation job."""

    def __init__(self, doc, variant, cfg):
        self.doc, self.variant, self.cfg = doc, variant, cfg

    def __call__(self, sub_model, data, w_sub):
        prior, bounds = _prior_bounds(self.doc, self.variant, w_sub)
        w, tr, _ = _run_estimator(self.variant, data, sub_model, w_sub, self.cfg, prior, bounds)
        return w, tr


def _initial_params(args, doc, model):
    if args.initial:
        return io.read_params(args.initial, model)
    w = model.params_vector()
    pert = doc.get("perturb")
    if pert:
        seed = args.seed if args.seed is not None else pert.get("seed", 0)
        w = perturb_parameters(w, pert.get("half_width", 0.5), seed)
    return w


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    doc = _config(args.config)
    model, peaks = _load_model(args.feeder)
    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.meter_class is not None:
        overrides["meter_class"] = args.meter_class
    if args.T is not None:
        overrides["T"] = args.T
    scen = dict(doc.get("scenario", doc))
    scen.update(overrides)
    cfg = io.config_from_dict(ScenarioConfig, scen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = generate_scenario(model, model.params_vector(), peaks, cfg)
    files = {"feeder": out / "feeder.json", "meters": out / "meters.csv", "source": out / "source.csv"}
    io.write_feeder(files["feeder"], model)
    io.write_meters(files["meters"], model, sc.data)
    io.write_source(files["source"], model, sc.data.source)
    if args.cut:
        plan = partition_network(model, args.cut)
        s = Problem(model, replace(sc.data, p=sc.data.p_clean, q=sc.data.q_clean)).s
        u = newton_oracle(model, model.params_vector(), s, sc.data.source)
        for li, series in quasi_source_series(plan, model.params_vector(), u, sc.data.source).items():
            path = out / io.quasi_source_filename(model, li)
            io.write_quasi_source(path, model, series)
            files[f"quasi:{model.lines[li].name}"] = path
    man = io.manifest(
        "synth", {"config": args.config} if args.config else {}, files, cfg.rng_seed, io.config_to_dict(cfg),
        {"meter_class": cfg.meter_class, "w_true": model.params_vector(), "unbalance": sc.unbalance},
    )
    io.write_json(out / "manifest.json", man)
    print(f"wrote {len(files)} files to {out} (unbalance {sc.unbalance:.4f})")
    return 0


def _estimate(args, require_partition=False):
    doc = _config(args.config)
    model = io.read_feeder(args.feeder)
    data = io.read_dataset(model, args.meters, args.source)
    variant = args.variant or doc.get("variant", "GL")
    if variant not in VARIANTS:
        raise GridfitError(f"unknown variant {variant}")
    cfg = _estimator_config(doc, args.seed)
    w0 = _initial_params(args, doc, model)
    cuts = [tuple(c) for c in doc.get("partition", {}).get("cut_edges", [])] + list(args.cut or [])
    if require_partition and not cuts:
        raise GridfitError("partition-estimate needs cut edges (config partition.cut_edges or --cut)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.csv"
    files = {}
    history = ()

    def save_trace(tr):
        io.write_trace(trace_path, tr)

    if cuts:
        plan = partition_network(model, cuts)
        qdir = Path(args.quasi_dir or Path(args.meters).parent)
        quasi = {}
        for li in plan.cut_edges:
            path = qdir / io.quasi_source_filename(model, li)
            if path.exists():
                quasi[li] = io.read_quasi_source(path, model, li, plan.quasi_source_of(li))
        sub_data = subnetwork_data(plan, data, quasi)

        workers = args.threads if args.threads else worker_count()
        w_best, traces = partitioned_estimate(plan, sub_data, w0, _SubJob(doc, variant, cfg), workers)
        for sub, tr in zip(plan.subnetworks, traces):
            path = out / f"trace_{sub.source}.csv"
            io.write_trace(path, tr)
            files[f"trace:{sub.source}"] = path
    else:
        # the callback rewrites the trace every epoch, so a failed run leaves a partial one
        prior, bounds = _prior_bounds(doc, variant, w0)
        w_best, tr, stages = _run_estimator(variant, data, model, w0, cfg, prior, bounds, save_trace)
        save_trace(tr)
        files["trace"] = trace_path
        history = np.concatenate([stages[0].J_history] + [t.J_history[1:] for t in stages[1:]])
    files["w_best"] = out / "w_best.csv"
    io.write_params(files["w_best"], model, w_best)
    files["w_initial"] = out / "w_initial.csv"
    io.write_params(files["w_initial"], model, w0)
    status = ""
    if args.truth:
        w_true = io.read_feeder(args.truth).params_vector()
        rep = evaluate(w0, w_best, w_true, variant, cfg.rng_seed, history)
        files["report"] = out / "report.csv"
        write_reports(files["report"], [rep])
        status = f"; MADR {rep.madr_initial:.3f}% -> {rep.madr_final:.3f}% ({rep.status}, improvement {rep.improvement:.2f}%)"
    inputs = {"feeder": args.feeder, "meters": args.meters, "source": args.source}
    if args.config:
        inputs["config"] = args.config
    io.write_json(out / "manifest.json", io.manifest(args.command, inputs, files, cfg.rng_seed, io.config_to_dict(cfg), {"variant": variant}))
    print(f"estimate written to {out}{status}")
    return 0


def cmd_estimate(args):
    return _estimate(args)


def cmd_partition_estimate(args):
    return _estimate(args, require_partition=True)


def cmd_gradcheck(args):
    from .gradcheck import check_gradient, corrupted_jacobian
    from .forward import SolverConfig

    model = io.read_feeder(args.feeder)
    data = io.read_dataset(model, args.meters, args.source)
    if args.params:
        w = io.read_params(args.params, model)
    else:
        w = perturb_parameters(model.params_vector(), args.half_width, args.seed or 0)
    n = min(args.instants, data.T)
    batch = np.arange(1, n + 1)
    problem = Problem(model, data, SolverConfig(mismatch_tol=1e-12))
    ctx = corrupted_jacobian() if args.corrupt_jacobian else contextlib.nullcontext()
    with ctx:
        rep = check_gradient(problem, w, batch, threshold=args.threshold)
    lines = ["coordinate,analytic,numeric,rel_err"] + [
        f"{m},{io.fmt(a)},{io.fmt(nv)},{io.fmt(e)}" for m, a, nv, e in rep.rows()
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    verdict = "PASS" if rep.passed else "FAIL"
    print(f"gradcheck {verdict}: max relative error {rep.max_rel_err:.3e} over {len(rep.rows())} coordinates (threshold {args.threshold:g})")
    if not rep.passed:
        raise CheckFailed("gradient check failed")
    return 0


def cmd_evaluate(args):
    reports = []
    if args.final:
        if not (args.truth and args.initial):
            raise GridfitError("evaluate --final needs --truth and --initial")
        truth = io.read_feeder(args.truth)
        w_true = truth.params_vector()
        w0 = io.read_params(args.initial, truth)
        w1 = io.read_params(args.final, truth)
        reports.append(evaluate(w0, w1, w_true, args.variant or "GL", args.seed or 0))
    for path in args.reports or []:
        reports.extend(read_reports(path))
    if not reports:
        raise GridfitError("nothing to evaluate: pass --final or --reports")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(out / "reports.csv", reports)
    write_quantiles(out / "quantiles.csv", reports)
    for r in reports:
        print(f"{r.variant:12s} seed {r.seed:3d}  {r.madr_initial:8.3f}% -> {r.madr_final:8.3f}%  improvement {r.improvement:7.2f}%  {r.status}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="gridfit", description="Distribution line parameter estimation from smart meter data.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scenario")
    sp.add_argument("--feeder", default="ieee13_like", help="corpus name or feeder JSON")
    sp.add_argument("--config", help="scenario config JSON (ScenarioConfig keys)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--meter-class", type=float)
    sp.add_argument("--T", type=int)
    sp.add_argument("--cut", action="append", type=_parse_cut, help="FROM:TO cut line; writes quasi-source files")
    sp.set_defaults(func=cmd_synth)

    for name, func in (("estimate", cmd_estimate), ("partition-estimate", cmd_partition_estimate)):
        sp = sub.add_parser(name, help="estimate line parameters" + (" per sub-network" if "partition" in name else ""))
        sp.add_argument("--feeder", required=True, help="feeder JSON; its parameters are the starting point")
        sp.add_argument("--meters", required=True)
        sp.add_argument("--source", required=True)
        sp.add_argument("--config", help="estimation config JSON")
        sp.add_argument("--initial", help="initial parameter table (ohm CSV)")
        sp.add_argument("--truth", help="feeder JSON with true parameters, enables the report")
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--cut", action="append", type=_parse_cut)
        sp.add_argument("--quasi-dir", help="directory with quasi-source files (default: next to the meter file)")
        sp.add_argument("--threads", type=int, help="parallel sub-network jobs (GRIDFIT_THREADS overrides)")
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference gradient")
    sp.add_argument("--feeder", required=True)
    sp.add_argument("--meters", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--params", help="parameter table to check at (default: perturbed feeder parameters)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--half-width", type=float, default=0.5)
    sp.add_argument("--instants", type=int, default=20)
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.add_argument("--out", help="per-coordinate report CSV")
    sp.add_argument("--corrupt-jacobian", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("evaluate", help="MADR reports and quantile tables")
    sp.add_argument("--truth")
    sp.add_argument("--initial")
    sp.add_argument("--final")
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--reports", nargs="*", help="existing report CSVs to aggregate")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("GRIDFIT_THREADS")
    if threads and hasattr(args, "threads"):
        args.threads = int(threads)
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"gridfit: {exc}", file=sys.stderr)
        return 1
    except (GridfitError, ValueError, OSError, KeyError) as exc:
        print(f"gridfit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
