"""Finite-difference check of the analytic loss gradient.

The numerical side never touches :mod:`gridfit.forward`: operating points
come from the Newton oracle.  A plain ``(L(w+h) - L(w-h)) / 2h`` loses
about ten digits to cancellation at ``h = 1e-6 |w|``, which swamps
coordinates whose gradient is a millionth of the largest one.  So every
perturbed operating point is solved in difference form, ``u(w +- h) =
u(w) + d``, with the mismatch expanded so that rounding scales with ``|d|``
instead of ``|u|``, and the loss difference is formed directly from the
residual increments.  The result is still a central difference of the exact
nonlinear loss, only evaluated without catastrophic cancellation.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .forward import _batch_times
from . import gradengine
from .gradengine import loss_and_gradient
from .netmodel import UPPER, line_matrices
from .synthlab import bus_admittance, mismatch_jacobian, newton_oracle


@dataclass
class _Base:
    """Newton solution at the centre point plus everything reused per step."""

    ybus: np.ndarray
    u: np.ndarray  # (B, 3N)
    u0: np.ndarray
    s: np.ndarray
    cur: np.ndarray  # Y u at the centre
    mis: np.ndarray
    jinv: np.ndarray
    phasor: np.ndarray  # meter phasors (B, M)
    resid: np.ndarray  # first-difference residuals at the centre


def _base_point(problem, w, batch):
    batch, times = _batch_times(batch)
    model = problem.model
    s, u0 = problem.s[times], problem.u0[times]
    b, n = s.shape[0], s.shape[1]
    u = newton_oracle(model, w, s, u0).reshape(b, 3 * n)
    ybus = bus_admittance(model, w)
    cur = np.concatenate([u0, u], axis=1) @ ybus[3:].T
    sf = s.reshape(b, 3 * n)
    jinv = np.linalg.inv(mismatch_jacobian(ybus, u, u0))
    phasor = problem.meters.phasor(u.reshape(b, n, 3))
    o = np.abs(phasor)
    i_cur = np.searchsorted(times, batch)
    i_prev = np.searchsorted(times, batch - 1)
    resid = (o[i_cur] - o[i_prev]) - (problem.v[batch] - problem.v[batch - 1])
    return _Base(ybus, u, u0, sf, cur, sf - u * np.conj(cur), jinv, phasor, resid), i_cur, i_prev


def _delta_line_admittance(z, y, dz, n_iter=4):
    """``inv(z + dz) - inv(z)`` without forming the difference of two inverses."""
    dy = -y @ dz @ y
    for _ in range(n_iter):
        dy = -(y + dy) @ dz @ y
    return dy


def _delta_bus(model, w, line, dz):
    R, X = line_matrices(w)
    z = R[line] + 1j * X[line]
    y = np.linalg.inv(z)
    dy = _delta_line_admittance(z, y, dz)
    idx = {n: i for i, n in enumerate(model.nodes)}
    ln = model.lines[line]
    a, b = 3 * idx[ln.from_node], 3 * idx[ln.to_node]
    size = 3 * len(model.nodes)
    dbus = np.zeros((size, size), dtype=complex)
    dbus[a : a + 3, a : a + 3] += dy
    dbus[b : b + 3, b : b + 3] += dy
    dbus[a : a + 3, b : b + 3] -= dy
    dbus[b : b + 3, a : a + 3] -= dy
    return dbus


def _delta_solution(base, dbus, n_iter=8):
    """``d`` with ``u + d`` solving the mismatch equations at ``Y + dY``."""
    b, n3 = base.u.shape
    ysub, dsub = base.ybus[3:], dbus[3:]
    d = np.zeros_like(base.u)
    zero_src = np.zeros((b, 3), dtype=complex)
    for _ in range(n_iter):
        di = np.concatenate([base.u0, base.u + d], axis=1) @ dsub.T + np.concatenate([zero_src, d], axis=1) @ ysub.T
        f = base.mis - d * np.conj(base.cur + di) - base.u * np.conj(di)
        rhs = np.concatenate([f.real, f.imag], axis=1)
        step = np.einsum("bij,bj->bi", base.jinv, rhs)
        d = d + step[:, :n3] + 1j * step[:, n3:]
        if np.max(np.abs(step)) <= 1e-17 * max(np.max(np.abs(d)), 1e-300):
            break
    return d


def _delta_outputs(base, meters, d):
    n = d.shape[1] // 3
    pd = meters.phasor(d.reshape(d.shape[0], n, 3))
    pc = base.phasor
    num = 2 * np.real(np.conj(pc) * pd) + np.abs(pd) ** 2
    return num / (np.abs(pc + pd) + np.abs(pc))


def _elementary_dz(m, h):
    """Perturbation of the line impedance for coordinate ``m`` (within a line)."""
    k = m % 12
    i, j = UPPER[k % 6]
    dz = np.zeros((3, 3), dtype=complex)
    val = h if k < 6 else 1j * h
    dz[i, j] = val
    dz[j, i] = val
    return dz


def fd_gradient(problem, w, batch, rel_step=1e-6):
    """Central differences with step ``rel_step * |w_m|`` per coordinate."""
    w = np.asarray(w, dtype=float)
    base, i_cur, i_prev = _base_point(problem, w, batch)
    grad = np.empty_like(w)

    def dresid(dbus):
        do = _delta_outputs(base, problem.meters, _delta_solution(base, dbus))
        return do[i_cur] - do[i_prev]

    for m in range(w.size):
        h = rel_step * abs(w[m]) if w[m] != 0 else rel_step
        hp = (w[m] + h) - w[m]
        hm = w[m] - (w[m] - h)
        line = m // 12
        rp = dresid(_delta_bus(problem.model, w, line, _elementary_dz(m, hp)))
        rm = dresid(_delta_bus(problem.model, w, line, _elementary_dz(m, -hm)))
        grad[m] = np.mean((rp - rm) * (2 * base.resid + rp + rm)) / (hp + hm)
    return grad


def relative_errors(analytic, numeric, floor=1e-10):
    """``|a - n| / max(|n|, floor)`` per coordinate."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    threshold: float

    @property
    def max_rel_err(self):
        return float(np.max(self.rel_err)) if self.rel_err.size else 0.0

    @property
    def passed(self):
        return self.max_rel_err < self.threshold

    def rows(self):
        return [
            (m, float(a), float(n), float(e))
            for m, (a, n, e) in enumerate(zip(self.analytic, self.numeric, self.rel_err))
        ]


def check_gradient(problem, w, batch, threshold=1e-4, floor=1e-10, rel_step=1e-6, backward=None, analytic=None):
    """Compare the analytic gradient against :func:`fd_gradient`.

    ``analytic`` overrides the gradient callable ``(problem, w, batch) -> grad``;
    it is the hook the negative-control tests use to inject a broken Jacobian.
    """
    if analytic is None:
        kw = {} if backward is None else {"cfg": backward}
        g = loss_and_gradient(problem, w, batch, **kw).grad
    else:
        g = np.asarray(analytic(problem, w, batch), dtype=float)
    fd = fd_gradient(problem, w, batch, rel_step)
    return GradCheckReport(g, fd, relative_errors(g, fd, floor), threshold)


@contextmanager
def corrupted_jacobian(scale=1.01):
    """Negative control: scale the load-term Jacobian blocks inside the backward pass."""
    original = gradengine.load_partials

    def broken(u, s):
        return scale * original(u, s)

    gradengine.load_partials = broken
    try:
        yield
    finally:
        gradengine.load_partials = original
