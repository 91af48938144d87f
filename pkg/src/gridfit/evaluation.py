"""Accuracy metrics, run reports and ablation sweeps."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInitial, GridfitError, ZeroTruth
from .estimator import BoundBox, EstimatorConfig, PriorModel, sgd_estimate, two_stage_map
from .synthlab import perturb_parameters

VARIANTS = ("GL", "GL+CON", "GL+MAP", "GL+CON&MAP")
REPORT_COLUMNS = (
    "variant", "seed", "status", "madr_initial", "madr_final", "improvement",
    "n_epochs", "J_history", "line_deviation",
)
QUANTILE_COLUMNS = ("variant", "q0", "q25", "q50", "q75", "q100")


def madr(w, w_true):
    """Mean absolute deviation ratio in percent: ``sum|w - w*| / sum|w*| * 100``."""
    w = np.asarray(w, dtype=float)
    w_true = np.asarray(w_true, dtype=float)
    if w.shape != w_true.shape:
        raise ValueError("w and w_true must have equal lengths")
    denom = np.sum(np.abs(w_true))
    if denom == 0:
        raise ZeroTruth("true parameters sum to zero in absolute value")
    return float(np.sum(np.abs(w - w_true)) / denom * 100.0)


def improvement(madr_initial, madr_final):
    """Percentage reduction of MADR; 100 means perfect recovery."""
    if not madr_initial > 0:
        raise DegenerateInitial("initial MADR is zero; improvement is undefined")
    return (madr_initial - madr_final) / madr_initial * 100.0


@dataclass
class EvaluationReport:
    variant: str
    seed: int
    madr_initial: float
    madr_final: float
    improvement: float
    line_deviation: np.ndarray = field(default_factory=lambda: np.zeros(0))
    J_history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    status: str = "ok"

    @property
    def n_epochs(self):
        return max(len(self.J_history) - 1, 0)


def evaluate(w_initial, w_final, w_true, variant="GL", seed=0, J_history=(), status="ok"):
    """Build an :class:`EvaluationReport`.

    A zero initial MADR yields status ``already optimal`` and improvement 0
    instead of an error.
    """
    m0, m1 = madr(w_initial, w_true), madr(w_final, w_true)
    if m0 > 0:
        imp = improvement(m0, m1)
    else:
        imp, status = 0.0, "already optimal"
    dev = np.abs(np.asarray(w_final, dtype=float) - np.asarray(w_true, dtype=float)).reshape(-1, 12)
    return EvaluationReport(variant, seed, m0, m1, imp, dev, np.asarray(J_history, dtype=float), status)


def variant_settings(variant, w_initial):
    """``(bounds, use_map)`` for one of :data:`VARIANTS`."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    bounds = BoundBox.around(w_initial) if "CON" in variant else None
    return bounds, "MAP" in variant


def run_variant(variant, data, model, w_initial, cfg=EstimatorConfig(), prior=None, bounds=None):
    """Estimate with one variant; returns ``(w_best, J_history)``.

    For the MAP variants the history concatenates both stages.
    """
    default_bounds, use_map = variant_settings(variant, w_initial)
    bounds = default_bounds if bounds is None and "CON" in variant else bounds
    if use_map:
        w, (tr1, tr2) = two_stage_map(data, model, w_initial, bounds, cfg, prior)
        return w, np.concatenate([tr1.J_history, tr2.J_history[1:]])
    w, tr = sgd_estimate(data, model, w_initial, None, bounds, cfg)
    return w, np.asarray(tr.J_history)


def ablation_run(model, make_data, variants=VARIANTS, seeds=range(5), cfg=EstimatorConfig(), half_width=0.5, progress=None):
    """Run every variant over every seed.

    ``make_data(seed)`` returns the measurement set for a seed (its
    ``w_true`` is the reference).  The seed also drives the initial
    perturbation and the mini-batch stream.  Failures are recorded as
    reports with an error status and the sweep continues.
    """
    from dataclasses import replace

    reports = []
    for seed in seeds:
        data = make_data(seed)
        w_true = data.w_true
        w0 = perturb_parameters(w_true, half_width, seed)
        run_cfg = replace(cfg, rng_seed=seed)
        for variant in variants:
            try:
                w, hist = run_variant(variant, data, model, w0, run_cfg)
                rep = evaluate(w0, w, w_true, variant, seed, hist)
            except (GridfitError, ValueError, ArithmeticError) as exc:
                m0 = madr(w0, w_true)
                rep = EvaluationReport(variant, seed, m0, float("nan"), float("nan"), status=f"error: {exc}")
            reports.append(rep)
            if progress is not None:
                progress(rep)
    return reports


def summarize(reports):
    """Per-variant mean and median improvement over successful runs."""
    out = {}
    for v in dict.fromkeys(r.variant for r in reports):
        vals = np.array([r.improvement for r in reports if r.variant == v and r.status == "ok"])
        out[v] = {
            "n": int(vals.size),
            "mean": float(np.mean(vals)) if vals.size else float("nan"),
            "median": float(np.median(vals)) if vals.size else float("nan"),
        }
    return out


def quantile_table(reports):
    """Rows ``(variant, q0, q25, q50, q75, q100)`` of improvement per variant."""
    rows = []
    for v in dict.fromkeys(r.variant for r in reports):
        vals = np.array([r.improvement for r in reports if r.variant == v and r.status == "ok"])
        q = np.quantile(vals, [0, 0.25, 0.5, 0.75, 1.0]) if vals.size else np.full(5, np.nan)
        rows.append((v,) + tuple(float(x) for x in q))
    return rows


# ---------------------------------------------------------------- files


def _fmt(x):
    return "%.17g" % x


def _vec(a):
    return " ".join(_fmt(x) for x in np.ravel(a))


def _unvec(s):
    return np.array([float(x) for x in s.split()]) if s.strip() else np.zeros(0)


def write_reports(path, reports):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REPORT_COLUMNS)
        for r in reports:
            wr.writerow([
                r.variant, r.seed, r.status, _fmt(r.madr_initial), _fmt(r.madr_final), _fmt(r.improvement),
                r.n_epochs, _vec(r.J_history), _vec(r.line_deviation),
            ])


def read_reports(path):
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected report columns {rd.fieldnames}")
        for row in rd:
            dev = _unvec(row["line_deviation"])
            out.append(EvaluationReport(
                row["variant"], int(row["seed"]), float(row["madr_initial"]), float(row["madr_final"]),
                float(row["improvement"]), dev.reshape(-1, 12) if dev.size else dev,
                _unvec(row["J_history"]), row["status"],
            ))
    return out


def write_quantiles(path, reports):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(QUANTILE_COLUMNS)
        for row in quantile_table(reports):
            wr.writerow([row[0]] + [_fmt(x) for x in row[1:]])
