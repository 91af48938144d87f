"""Fixed-point three-phase power flow, meter outputs and the first-difference loss."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .data import FLAT_START
from .errors import Diverged, NotConverged, ZeroVoltage
from .netmodel import assemble_admittance, injections_from_meters


@dataclass(frozen=True)
class SolverConfig:
    eps_forward: float = 1e-20
    max_iter: int = 10000
    divergence_cap: float = 1e6
    damping: float = 1.0
    v_band: tuple = (0.5, 1.5)
    # keep sweeping after the ratio test until the max power mismatch is below this; 0 disables
    mismatch_tol: float = 3e-9

    def __post_init__(self):
        if not self.eps_forward > 0:
            raise ValueError("eps_forward must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


DEFAULT_SOLVER = SolverConfig()


def transition_step(u, s, u0, cache):
    """One synchronous application of the local transition at every state node.

    ``u``/``s``: ``(B, N, 3)`` voltages and injections, ``u0``: ``(B, 3)``.
    Computes ``u_n <- Z_nn (conj(s_n)/conj(u_n) + sum_k Y_nk u_k)`` for all n
    from the previous iterate only.
    """
    u = np.asarray(u)
    if np.any(u == 0):
        raise ZeroVoltage("a phase voltage is exactly zero")
    b, n = u.shape[0], cache.n_state
    cur = np.conj(s) / np.conj(u)
    rhs = cur.reshape(b, 3 * n) + u.reshape(b, 3 * n) @ cache.ynb.T + u0 @ cache.ysrc.T
    return (rhs @ cache.zblk.T).reshape(b, n, 3)


def solve_fixed_point(cache, s, u0, cfg=DEFAULT_SOLVER, times=None, u_start=None):
    """Batched fixed-point solve for independent instants.

    Each instant starts from the balanced flat voltage (or ``u_start``) and
    stops on its own once ``||x^k - x^(k-1)||^2 < eps ||x^(k-1)||^2``, where
    the norm includes the fixed source state.  If ``cfg.mismatch_tol`` is
    positive the sweep also continues until the power mismatch is below it.
    Returns ``(u, iterations)``.
    """
    s = np.ascontiguousarray(s, dtype=complex)
    u0 = np.ascontiguousarray(u0, dtype=complex)
    b, n = s.shape[0], cache.n_state
    times = np.arange(b) if times is None else np.asarray(times)
    if u_start is None:
        u_start = np.broadcast_to(FLAT_START, (b, n, 3))
    u_start = np.ascontiguousarray(u_start, dtype=complex)
    out = np.empty((b, n, 3), dtype=complex)
    iters = np.zeros(b, dtype=np.int64)
    status = np.zeros(b, dtype=np.int64)
    ptr, idx, y, _ = cache.neighbours
    kernels.fixed_point(
        s, u0, u_start, cache.z_nn, cache.y_nn, cache.ysrc_blocks, ptr, idx, y,
        cfg.eps_forward, cfg.max_iter, cfg.divergence_cap, cfg.damping, cfg.mismatch_tol,
        out, iters, status,
    )
    bad = np.flatnonzero(status)
    if bad.size:
        k = bad[0]
        t = int(times[k])
        code = status[k]
        if code == kernels.ZERO_VOLTAGE:
            raise ZeroVoltage("a phase voltage is exactly zero", t=t)
        if code == kernels.DIVERGED:
            raise Diverged("fixed-point iterate exceeded the divergence cap", t=t)
        raise NotConverged(f"no convergence within {cfg.max_iter} iterations", t=t)

    mags = np.abs(out)
    lo, hi = cfg.v_band
    if np.any(mags < lo) or np.any(mags > hi):
        k = np.argwhere((mags < lo) | (mags > hi))[0][0]
        raise Diverged(f"converged voltage outside the {lo}-{hi} pu band", t=int(times[k]))
    return out, iters


def forward_solve(model, w, s, u0, cfg=DEFAULT_SOLVER, cache=None):
    """Solve the fixed point for one instant (``s``: ``(N,3)``) or a batch."""
    cache = assemble_admittance(model, w) if cache is None else cache
    s = np.asarray(s, dtype=complex)
    single = s.ndim == 2
    if single:
        s, u0 = s[None], np.asarray(u0)[None]
    u, _ = solve_fixed_point(cache, s, u0, cfg)
    return u[0] if single else u


def power_mismatch(cache, s, u, u0):
    """Residual ``s_n - u_n * conj(Y_nn u_n - sum_k Y_nk u_k)`` per node/phase."""
    b, n = u.shape[0], cache.n_state
    uf = u.reshape(b, 3 * n)
    ynn_u = np.einsum("nij,bnj->bni", cache.y_nn, u).reshape(b, 3 * n)
    cur = ynn_u - uf @ cache.ynb.T - u0 @ cache.ysrc.T
    return (s.reshape(b, 3 * n) - uf * np.conj(cur)).reshape(b, n, 3)


def meter_output(u_node, load):
    """Voltage magnitude reported by ``load``'s meter for node voltages ``u_node``."""
    ph = load.measured_phases
    u_node = np.asarray(u_node)
    if len(ph) == 1:
        return np.abs(u_node[..., ph[0]])
    return np.abs(u_node[..., ph[0]] - u_node[..., ph[1]])


@dataclass(frozen=True)
class MeterMap:
    """Vectorised meter bookkeeping: node state index and measured phases."""

    node: np.ndarray
    i: np.ndarray
    j: np.ndarray  # -1 for single-phase readings

    @classmethod
    def from_model(cls, model):
        idx = model.state_index
        node, ii, jj = [], [], []
        for load in model.loads:
            ph = load.measured_phases
            node.append(idx[load.node])
            ii.append(ph[0])
            jj.append(ph[1] if len(ph) == 2 else -1)
        return cls(np.array(node, dtype=int), np.array(ii, dtype=int), np.array(jj, dtype=int))

    @cached_property
    def two_phase(self):
        return self.j >= 0

    def phasor(self, u):
        """Per-meter measured phasor (phase voltage or phase-phase difference)."""
        ui = u[:, self.node, self.i]
        uj = np.where(self.two_phase, u[:, self.node, np.maximum(self.j, 0)], 0.0)
        return ui - uj

    def outputs(self, u):
        return np.abs(self.phasor(u))


class Problem:
    """A feeder paired with its measurement series, with derived per-unit arrays.

    Holds nodal injections ``s`` ``(T+1, N, 3)``, source phasors ``u0`` and
    measured voltages ``v``; the loss and gradient code index into these.
    """

    def __init__(self, model, data, solver=DEFAULT_SOLVER):
        if data.n_meters != model.n_meters:
            raise ValueError("data and feeder disagree on the number of meters")
        self.model = model
        self.data = data
        self.solver = solver
        self.s = injections_from_meters(model, data.p, data.q)
        self.u0 = data.source
        self.v = data.v
        self.meters = MeterMap.from_model(model)

    @property
    def T(self):
        return self.data.T

    @property
    def M(self):
        return self.model.n_meters

    def solve(self, cache, times, store=None):
        """Solve the given instants.

        ``store`` is an optional ``(T+1, N, 3)`` array of previous solutions:
        iterations start from it instead of the flat voltage, and it is
        updated in place with the new fixed points.
        """
        times = np.asarray(times, dtype=int)
        start = None if store is None else store[times]
        u, _ = solve_fixed_point(cache, self.s[times], self.u0[times], self.solver, times=times, u_start=start)
        if store is not None:
            store[times] = u
        return u

    def flat_store(self):
        return np.broadcast_to(FLAT_START, (self.T + 1, self.model.n_state, 3)).copy()


def _batch_times(batch):
    batch = np.asarray(batch, dtype=int)
    if batch.ndim != 1 or batch.size == 0:
        raise ValueError("a batch must be a non-empty 1-D set of instants")
    if np.any(batch < 1):
        raise ValueError("batch instants must be >= 1 (first differences need t-1)")
    times = np.union1d(batch, batch - 1)
    return batch, times


def error_terms(problem, cache, batch, store=None):
    """Solve the instants of ``batch`` and its backward shift.

    Returns ``(times, u, o, resid)`` where ``resid[k] = o~(t_k) - v~(t_k)`` for
    ``t_k`` in ``batch``.
    """
    batch, times = _batch_times(batch)
    if np.any(batch > problem.T):
        raise ValueError("batch instant outside the data horizon")
    u = problem.solve(cache, times, store)
    o = problem.meters.outputs(u)
    cur = np.searchsorted(times, batch)
    prev = np.searchsorted(times, batch - 1)
    o_diff = o[cur] - o[prev]
    v_diff = problem.v[batch] - problem.v[batch - 1]
    return times, u, o, o_diff - v_diff


def loss_per_instant(resid):
    """``e_w(t) = mean_m (v~ - o~)^2`` for each row of residuals."""
    return np.mean(resid**2, axis=1)


def loss(problem, w, batch, cache=None, store=None):
    """Mean first-difference loss ``e_w`` over the instants in ``batch``."""
    cache = assemble_admittance(problem.model, w) if cache is None else cache
    _, _, _, resid = error_terms(problem, cache, batch, store)
    return float(np.mean(loss_per_instant(resid)))
