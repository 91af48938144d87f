"""Split a radial feeder at chosen lines into independently estimable sub-networks.

Every cut line has a quasi-source end, the end nearer the substation.  The
sub-network downstream of the cut is sourced at that node and owns the cut
line.  In the upstream sub-network the same node stays an ordinary node and
carries three single-phase pseudo-loads (AN, BN, CN) whose power equals the
flow into the cut line, so both sides see the same operating point.
"""

from collections import deque
from dataclasses import dataclass, field, replace
import os

import numpy as np

from .data import TimeSeriesSet, phasor_angles, source_phasors
from .errors import InvalidCut, MissingQuasiSourceData, OwnershipConflict
from .netmodel import FeederModel, LoadSpec

PSEUDO_CONNECTIONS = ("AN", "BN", "CN")


@dataclass(frozen=True)
class SubNetwork:
    """One partition piece.

    ``lines``/``meters`` index the original model; ``pseudo_cuts`` lists the
    cut lines whose quasi-source sits inside this piece, each contributing
    three pseudo meters appended after the real ones.  ``cut_line`` is the
    owned cut line feeding a quasi-sourced piece (``None`` at the substation).
    """

    model: FeederModel
    lines: tuple
    meters: tuple
    pseudo_cuts: tuple = ()
    cut_line: int = None

    @property
    def source(self):
        return self.model.source

    @property
    def quasi_sourced(self):
        return self.cut_line is not None

    @property
    def pseudo_nodes(self):
        return tuple(ld.node for ld in self.model.loads if ld.pseudo)[::3]


@dataclass(frozen=True)
class PartitionPlan:
    model: FeederModel
    cut_edges: tuple
    subnetworks: tuple = field(default=())

    @property
    def quasi_sources(self):
        """Quasi-source node of every cut line, in cut order."""
        return tuple(self.quasi_source_of(li) for li in self.cut_edges)

    def quasi_source_of(self, line):
        for sub in self.subnetworks:
            if sub.cut_line == line:
                return sub.source
        raise KeyError(line)

    def owner(self):
        """Map original line index -> sub-network index; conflicts raise."""
        own = {}
        for k, sub in enumerate(self.subnetworks):
            for li in sub.lines:
                if li in own:
                    raise OwnershipConflict(f"line {self.model.lines[li].name} owned by sub-networks {own[li]} and {k}")
                own[li] = k
        missing = set(range(self.model.n_lines)) - set(own)
        if missing:
            names = sorted(self.model.lines[li].name for li in missing)
            raise OwnershipConflict(f"lines without an owner: {names}")
        return own


def _resolve_edge(model, edge):
    if isinstance(edge, (int, np.integer)):
        if not 0 <= edge < model.n_lines:
            raise InvalidCut(f"line index {edge} out of range")
        return int(edge)
    if isinstance(edge, str):
        for li, ln in enumerate(model.lines):
            if ln.name == edge:
                return li
        raise InvalidCut(f"unknown line {edge!r}")
    a, b = edge
    for li, ln in enumerate(model.lines):
        if {ln.from_node, ln.to_node} == {a, b}:
            return li
    raise InvalidCut(f"no line between {a} and {b}")


def _depths(model):
    depth = {model.source: 0}
    queue = deque([model.source])
    while queue:
        n = queue.popleft()
        for k, _ in model.adjacency[n]:
            if k not in depth:
                depth[k] = depth[n] + 1
                queue.append(k)
    return depth


def _components(model, cut):
    comp = {}
    for start in model.nodes:
        if start in comp:
            continue
        label = len(set(comp.values()))
        comp[start] = label
        stack = [start]
        while stack:
            n = stack.pop()
            for k, li in model.adjacency[n]:
                if li in cut or k in comp:
                    continue
                comp[k] = label
                stack.append(k)
    return comp


def pseudo_meter_id(model, line, phase):
    return f"pseudo:{model.lines[line].name}:{phase}"


def partition_network(model, cut_edges, available=None):
    """Build the :class:`PartitionPlan` for ``cut_edges``.

    Edges are line indices, line names or ``(from, to)`` node pairs.
    ``available`` optionally lists the cut lines (any accepted form) that
    have quasi-source measurements; a cut missing from it raises
    :class:`MissingQuasiSourceData`.
    """
    cut = tuple(dict.fromkeys(_resolve_edge(model, e) for e in cut_edges))
    if available is not None:
        have = {_resolve_edge(model, e) for e in available}
        for li in cut:
            if li not in have:
                raise MissingQuasiSourceData(f"no quasi-source measurements for cut line {model.lines[li].name}")
    if not cut:
        sub = SubNetwork(model, tuple(range(model.n_lines)), tuple(range(model.n_meters)))
        return PartitionPlan(model, (), (sub,))

    comp = _components(model, set(cut))
    n_comp = len(set(comp.values()))
    if n_comp != len(cut) + 1:
        names = [model.lines[li].name for li in cut]
        raise InvalidCut(f"cut lines {names} leave {n_comp} component(s); each cut must disconnect the feeder")
    depth = _depths(model)
    # quasi-source end and the component it feeds
    qs_of, feeds = {}, {}
    for li in cut:
        ln = model.lines[li]
        a, b = ln.from_node, ln.to_node
        up, down = (a, b) if depth[a] < depth[b] else (b, a)
        qs_of[li] = up
        feeds[comp[down]] = li

    labels = sorted(set(comp.values()), key=lambda c: min(model.nodes.index(n) for n in comp if comp[n] == c))
    subs = []
    for c in labels:
        members = [n for n in model.nodes if comp[n] == c]
        cut_line = feeds.get(c)
        if cut_line is None:
            if model.source not in members:
                raise InvalidCut("a component is neither the substation side nor fed by a cut line")
            nodes = members
        else:
            nodes = [qs_of[cut_line]] + members
        node_set = set(nodes)
        lines = [
            li for li, ln in enumerate(model.lines)
            if li not in cut and ln.from_node in node_set and ln.to_node in node_set
        ]
        if cut_line is not None:
            lines.append(cut_line)
        lines.sort()
        meters = tuple(m for m, ld in enumerate(model.loads) if comp[ld.node] == c and ld.node != nodes[0])
        pseudo_cuts = tuple(li for li in cut if qs_of[li] in node_set and qs_of[li] != nodes[0])
        loads = [model.loads[m] for m in meters]
        for li in pseudo_cuts:
            for conn in PSEUDO_CONNECTIONS:
                ph = conn[0].lower()
                loads.append(LoadSpec(pseudo_meter_id(model, li, ph), qs_of[li], conn, ph, pseudo=True))
        sub_model = FeederModel(
            tuple(nodes), tuple(model.lines[li] for li in lines), tuple(loads),
            model.base_kv, model.base_kva, f"{model.name}/{nodes[0]}",
        )
        subs.append(SubNetwork(sub_model, tuple(lines), meters, pseudo_cuts, cut_line))
    plan = PartitionPlan(model, cut, tuple(subs))
    plan.owner()
    return plan


def sub_parameters(sub, w):
    """Slice the full parameter vector down to ``sub``'s lines."""
    w = np.asarray(w, dtype=float).reshape(-1, 12)
    return w[list(sub.lines)].reshape(-1)


def merge_estimates(plan, sub_ws):
    """Reassemble a full-feeder parameter vector from per-sub-network vectors."""
    if len(sub_ws) != len(plan.subnetworks):
        raise ValueError("need one parameter vector per sub-network")
    plan.owner()
    out = np.empty((plan.model.n_lines, 12))
    for sub, w in zip(plan.subnetworks, sub_ws):
        w = np.asarray(w, dtype=float)
        if w.shape != (12 * len(sub.lines),):
            raise ValueError(f"sub-network {sub.source}: expected {12 * len(sub.lines)} parameters")
        out[list(sub.lines)] = w.reshape(-1, 12)
    return out.reshape(-1)


# ---------------------------------------------------------------- quasi-source data


@dataclass
class QuasiSourceSeries:
    """Measurements at the quasi-source end of one cut line, per-unit.

    ``vmag``/angles describe the node voltage (phase a is the reference);
    ``p``/``q`` are per-phase powers flowing into the cut line, shape ``(T+1, 3)``.
    """

    line: int
    node: str
    vmag: np.ndarray
    ang_ab_deg: np.ndarray
    ang_ac_deg: np.ndarray
    p: np.ndarray
    q: np.ndarray

    @property
    def phasors(self):
        return source_phasors(self.vmag, self.ang_ab_deg, self.ang_ac_deg)


def quasi_source_series(plan, w, u, u0):
    """Exact quasi-source measurements from a whole-network solution.

    ``u``: ``(T+1, N, 3)`` voltages of the full model at parameters ``w``.
    Returns ``{cut line index: QuasiSourceSeries}``.
    """
    from .netmodel import line_matrices

    model = plan.model
    R, X = line_matrices(w)
    idx = model.state_index
    out = {}
    for li in plan.cut_edges:
        ln = model.lines[li]
        node = plan.quasi_source_of(li)
        other = ln.to_node if node == ln.from_node else ln.from_node

        def volt(n):
            return u0 if idx[n] < 0 else u[:, idx[n]]

        uq, uk = volt(node), volt(other)
        y = np.linalg.inv(R[li] + 1j * X[li])
        cur = (uq - uk) @ y.T
        flow = uq * np.conj(cur)
        ab, ac = phasor_angles(uq)
        out[li] = QuasiSourceSeries(li, node, np.abs(uq), ab, ac, flow.real.copy(), flow.imag.copy())
    return out


def subnetwork_data(plan, data, quasi):
    """Per-sub-network :class:`TimeSeriesSet` list.

    ``quasi`` maps cut line index to :class:`QuasiSourceSeries`; missing
    entries raise :class:`MissingQuasiSourceData`.
    """
    out = []
    for sub in plan.subnetworks:
        needed = list(sub.pseudo_cuts) + ([sub.cut_line] if sub.quasi_sourced else [])
        for li in needed:
            if li not in quasi:
                raise MissingQuasiSourceData(f"no quasi-source measurements for cut line {plan.model.lines[li].name}")
        cols = list(sub.meters)

        def pick(a):
            return None if a is None else a[:, cols]

        p, q, v = [data.p[:, cols]], [data.q[:, cols]], [data.v[:, cols]]
        vc = [pick(data.v_clean)] if data.v_clean is not None else None
        for li in sub.pseudo_cuts:
            qs = quasi[li]
            p.append(qs.p)
            q.append(qs.q)
            v.append(qs.vmag)
            if vc is not None:
                vc.append(qs.vmag)
        source = quasi[sub.cut_line].phasors if sub.quasi_sourced else data.source
        w_true = None if data.w_true is None else sub_parameters(sub, data.w_true)
        out.append(
            TimeSeriesSet(
                p=np.concatenate(p, axis=1), q=np.concatenate(q, axis=1), v=np.concatenate(v, axis=1),
                source=source, meter_ids=tuple(ld.meter_id for ld in sub.model.loads),
                w_true=w_true, v_clean=None if vc is None else np.concatenate(vc, axis=1),
                meta=dict(data.meta, subnetwork=sub.source),
            )
        )
    return out


def rotate_to_reference(u, ref):
    """Rotate voltages so that the phase-a angle of ``ref`` ``(T, 3)`` is zero."""
    rot = np.exp(-1j * np.angle(ref[:, 0]))
    return u * rot.reshape((-1,) + (1,) * (u.ndim - 1))


def worker_count():
    """Parallelism degree: ``GRIDFIT_THREADS`` if set, else the CPU count."""
    env = os.environ.get("GRIDFIT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def partitioned_estimate(plan, sub_data, w_initial, estimate, workers=None):
    """Run ``estimate(sub_model, data, w_sub)`` on every sub-network and merge.

    ``estimate`` returns ``(w_best, trace)``.  Jobs are independent; with
    more than one worker they run in separate processes, and the merge order
    is fixed regardless of completion order.
    """
    ws = [sub_parameters(sub, w_initial) for sub in plan.subnetworks]
    jobs = list(zip([s.model for s in plan.subnetworks], sub_data, ws))
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(estimate, *zip(*jobs)))
    else:
        results = [estimate(*job) for job in jobs]
    merged = merge_estimates(plan, [r[0] for r in results])
    return merged, [r[1] for r in results]


def with_plan_params(plan, w):
    """Sub-network models carrying the matching slices of ``w``."""
    return [replace(sub, model=sub.model.with_params(sub_parameters(sub, w))) for sub in plan.subnetworks]
