"""File formats: feeder JSON, meter/source/trace CSV, parameter tables, configs and manifests.

Files carry physical units (ohm, kW, kvar, V, degrees); everything is
converted to per-unit on load with the feeder's bases.  Numbers are written
with 17 significant digits so reruns diff cleanly.
"""

import csv
import dataclasses
import hashlib
import json
import time

import numpy as np

from .data import TimeSeriesSet, phasor_angles, source_phasors
from .errors import FeederError, MissingReading
from .netmodel import PARAM_NAMES, FeederModel, Line, LineParameters, LoadSpec

METER_COLUMNS = ("t", "meter_id", "p_kw", "q_kvar", "v_volt")
SOURCE_COLUMNS = ("t", "vmag_a", "vmag_b", "vmag_c", "ang_ab_deg", "ang_ac_deg")
QUASI_COLUMNS = SOURCE_COLUMNS + ("p_kw_a", "p_kw_b", "p_kw_c", "q_kvar_a", "q_kvar_b", "q_kvar_c")
TRACE_COLUMNS = ("epoch", "J_best", "J_full", "step_accept_rate", "wall_ms")
PARAM_COLUMNS = ("line", "from", "to") + PARAM_NAMES


def fmt(x):
    return "%.17g" % x


# ---------------------------------------------------------------- feeders


def feeder_to_dict(model):
    zb = model.z_base
    lines = []
    for ln in model.lines:
        rec = {"name": ln.name, "from": ln.from_node, "to": ln.to_node}
        rec.update({k: v * zb for k, v in zip(PARAM_NAMES, ln.params.as_vector())})
        lines.append(rec)
    return {
        "name": model.name,
        "bases": {"base_kv": model.base_kv, "base_kva": model.base_kva},
        "nodes": list(model.nodes),
        "lines": lines,
        "loads": [
            {"meter_id": ld.meter_id, "node": ld.node, "connection": ld.connection, "phase": ld.phase}
            for ld in model.loads
        ],
    }


def feeder_from_dict(doc):
    try:
        bases = doc["bases"]
        base_kv, base_kva = float(bases["base_kv"]), float(bases["base_kva"])
        zb = base_kv**2 * 1000.0 / base_kva
        lines = []
        for k, rec in enumerate(doc["lines"]):
            vals = [float(rec[p]) / zb for p in PARAM_NAMES]
            name = rec.get("name", f"{rec['from']}-{rec['to']}")
            lines.append(Line(name, str(rec["from"]), str(rec["to"]), LineParameters.from_vector(vals)))
        loads = [
            LoadSpec(str(r["meter_id"]), str(r["node"]), r["connection"], r.get("phase", "a"))
            for r in doc["loads"]
        ]
        nodes = [str(n) for n in doc["nodes"]]
    except KeyError as exc:
        raise FeederError(f"feeder file is missing {exc}") from None
    return FeederModel(tuple(nodes), tuple(lines), tuple(loads), base_kv, base_kva, doc.get("name", "feeder"))


def write_feeder(path, model):
    with open(path, "w") as fh:
        json.dump(feeder_to_dict(model), fh, indent=2)
        fh.write("\n")


def read_feeder(path):
    with open(path) as fh:
        return feeder_from_dict(json.load(fh))


# ---------------------------------------------------------------- meter and source series


def _meter_v_base(model):
    # two-phase meters report line-to-line volts; per-unit keeps the L-N base
    return model.v_base


def write_meters(path, model, data):
    sb, vb = model.s_base, _meter_v_base(model)
    ids = [ld.meter_id for ld in model.loads]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METER_COLUMNS)
        for t in range(data.T + 1):
            for m, mid in enumerate(ids):
                wr.writerow([t, mid, fmt(data.p[t, m] * sb), fmt(data.q[t, m] * sb), fmt(data.v[t, m] * vb)])


def read_meters(path, model):
    """``(p, q, v)`` per-unit arrays ``(T+1, M)`` in the model's meter order."""
    col = {ld.meter_id: m for m, ld in enumerate(model.loads)}
    rows = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != METER_COLUMNS:
            raise FeederError(f"{path}: expected columns {METER_COLUMNS}")
        for r in rd:
            if r["meter_id"] not in col:
                raise FeederError(f"{path}: meter {r['meter_id']} is not in the feeder")
            rows.append((int(r["t"]), col[r["meter_id"]], float(r["p_kw"]), float(r["q_kvar"]), float(r["v_volt"])))
    if not rows:
        raise FeederError(f"{path}: no readings")
    n_t = max(r[0] for r in rows) + 1
    p, q, v = (np.full((n_t, model.n_meters), np.nan) for _ in range(3))
    for t, m, pk, qk, vv in rows:
        p[t, m], q[t, m], v[t, m] = pk, qk, vv
    missing = np.argwhere(np.isnan(p) | np.isnan(v))
    if missing.size:
        t, m = missing[0]
        raise MissingReading(f"{path}: no reading for meter {model.loads[m].meter_id} at t={t}")
    sb, vb = model.s_base, _meter_v_base(model)
    return p / sb, q / sb, v / vb


def _series_rows(u, extra=None):
    ab, ac = phasor_angles(u)
    mag = np.abs(u)
    for t in range(u.shape[0]):
        row = [t] + [fmt(x) for x in mag[t]] + [fmt(ab[t]), fmt(ac[t])]
        if extra is not None:
            row += [fmt(x) for x in extra[t]]
        yield row


def write_source(path, model, phasors):
    """Source phasors ``(T+1, 3)`` per-unit -> magnitudes in volts and angle differences."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SOURCE_COLUMNS)
        wr.writerows(_series_rows(np.asarray(phasors) * model.v_base))


def _read_series(path, columns):
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ())[: len(columns)] != columns:
            raise FeederError(f"{path}: expected columns {columns}")
        rows = sorted(rd, key=lambda r: int(r["t"]))
    ts = [int(r["t"]) for r in rows]
    if ts != list(range(len(ts))):
        raise MissingReading(f"{path}: instants must run 0..T without gaps")
    return rows


def read_source(path, model):
    rows = _read_series(path, SOURCE_COLUMNS)
    mag = np.array([[float(r[c]) for c in ("vmag_a", "vmag_b", "vmag_c")] for r in rows]) / model.v_base
    ab = np.array([float(r["ang_ab_deg"]) for r in rows])
    ac = np.array([float(r["ang_ac_deg"]) for r in rows])
    return source_phasors(mag, ab, ac)


def write_quasi_source(path, model, series):
    """One :class:`~gridfit.partition.QuasiSourceSeries` in the source schema plus flow columns."""
    sb = model.s_base
    flow = np.concatenate([series.p, series.q], axis=1) * sb
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(QUASI_COLUMNS)
        wr.writerows(_series_rows(series.phasors * model.v_base, flow))


def read_quasi_source(path, model, line, node):
    from .partition import QuasiSourceSeries

    rows = _read_series(path, QUASI_COLUMNS)
    get = lambda cols: np.array([[float(r[c]) for c in cols] for r in rows])  # noqa: E731
    mag = get(("vmag_a", "vmag_b", "vmag_c")) / model.v_base
    p = get(("p_kw_a", "p_kw_b", "p_kw_c")) / model.s_base
    q = get(("q_kvar_a", "q_kvar_b", "q_kvar_c")) / model.s_base
    ab = np.array([float(r["ang_ab_deg"]) for r in rows])
    ac = np.array([float(r["ang_ac_deg"]) for r in rows])
    return QuasiSourceSeries(line, node, mag, ab, ac, p, q)


def quasi_source_filename(model, line):
    return f"quasi_{model.lines[line].name}.csv"


def read_dataset(model, meters_path, source_path, w_true=None):
    p, q, v = read_meters(meters_path, model)
    src = read_source(source_path, model)
    if src.shape[0] != p.shape[0]:
        raise FeederError("meter and source files cover different horizons")
    return TimeSeriesSet(p=p, q=q, v=v, source=src, meter_ids=tuple(ld.meter_id for ld in model.loads), w_true=w_true)


# ---------------------------------------------------------------- parameters, traces


def write_params(path, model, w):
    w = np.asarray(w, dtype=float).reshape(-1, 12) * model.z_base
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(PARAM_COLUMNS)
        for ln, row in zip(model.lines, w):
            wr.writerow([ln.name, ln.from_node, ln.to_node] + [fmt(x) for x in row])


def read_params(path, model):
    """Per-unit parameter vector from an ohm table; lines are matched by name."""
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        rows = {r["line"]: r for r in rd}
    out = []
    for ln in model.lines:
        if ln.name not in rows:
            raise FeederError(f"{path}: no parameters for line {ln.name}")
        out.append([float(rows[ln.name][k]) for k in PARAM_NAMES])
    return np.array(out).reshape(-1) / model.z_base


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRACE_COLUMNS)
        for r in trace.epochs:
            wr.writerow([r.epoch, fmt(r.J_best), fmt(r.J_full), fmt(r.step_accept_rate), fmt(r.wall_ms)])


def read_trace(path):
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in TRACE_COLUMNS[1:]}}
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------- configs and manifests


def config_to_dict(cfg):
    """Nested plain dict of a (possibly nested) config dataclass."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = config_to_dict(v)
        elif isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def config_from_dict(cls, doc):
    """Instantiate ``cls`` from a dict, recursing into dataclass-typed fields.

    Unknown keys raise ``ValueError`` so typos in config files surface.
    """
    doc = dict(doc or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for k, v in doc.items():
        cur = getattr(defaults, k)
        if dataclasses.is_dataclass(cur):
            v = config_from_dict(type(cur), v)
        elif isinstance(cur, tuple):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(subcommand, inputs, outputs, seed=None, config=None, extra=None):
    """Run record: content hashes of inputs and outputs plus seed and config.

    The wall-clock timestamp is kept apart from the hashed content so
    reruns stay comparable.
    """
    doc = {
        "subcommand": subcommand,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(p), "sha256": file_hash(p)} for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": file_hash(p)} for k, p in outputs.items()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        doc.update(extra)
    return doc
