"""Analytic gradient of the first-difference loss through the fixed point.

Two routes to the same derivatives live here:

* dense builders (:func:`build_A_hat`, :func:`build_b_hat`, :func:`d_xi_d_w`,
  :func:`d_F_d_w`) that assemble the full matrices block by block, with
  ``d<Z_nn>/dxi`` taken through the Woodbury split of ``Z_nn`` and the
  trace-rule derivative of each real inverse.  They are meant for checks and
  small feeders.
* the contracted path used by :func:`backward_gradient`, which never forms
  ``dF/dxi``.  It uses ``d(Y^-1) = -Y^-1 dY Y^-1`` in complex form, so that
  line ``l`` between ``n`` and ``k`` moves ``f_n`` by
  ``Z_nn dY_l (u_k - f_n)``, and contracts that with ``z`` directly.

State layout per node is ``[Re u (3); Im u (3)]``; a paired state stacks the
``t-1`` half before the ``t`` half.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .blockmath import COND_CAP, embed, sym_elementary, woodbury_parts
from .errors import SingularMatrix, ZeroMagnitude, ZeroVoltage, ZIterationDiverged, NotConverged
from .forward import error_terms
from .netmodel import UPPER, assemble_admittance, incidences, line_matrices


@dataclass(frozen=True)
class BackwardConfig:
    eps_backward: float = 1e-20
    max_iter: int = 10000
    z_cap: float = 1e12

    def __post_init__(self):
        if not self.eps_backward > 0:
            raise ValueError("eps_backward must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


DEFAULT_BACKWARD = BackwardConfig()


# ---------------------------------------------------------------- state Jacobian


def load_partials(u, s):
    """Real 6x6 partials of ``conj(s)/conj(u)`` w.r.t. ``[alpha; beta]`` per node.

    ``u``/``s``: ``(..., N, 3)``.  Per phase, with ``d = |u|^4``:
    ``dRe/dalpha = (p(b^2 - a^2) - 2qab)/d``, ``dRe/dbeta = (q(a^2 - b^2) - 2pab)/d``,
    ``dIm/dalpha = dRe/dbeta`` and ``dIm/dbeta = -dRe/dalpha``.  Phases do not
    couple, so the off-phase entries are zero.
    """
    u = np.asarray(u)
    s = np.asarray(s)
    a, b = u.real, u.imag
    p, q = s.real, s.imag
    den = (a * a + b * b) ** 2
    if np.any(den == 0):
        raise ZeroVoltage("zero phase voltage in the load-term partial")
    ra = (p * (b * b - a * a) - 2 * q * a * b) / den
    rb = (q * (a * a - b * b) - 2 * p * a * b) / den
    out = np.zeros(u.shape[:-1] + (6, 6))
    for i in range(3):
        out[..., i, i] = ra[..., i]
        out[..., i, 3 + i] = rb[..., i]
        out[..., 3 + i, i] = rb[..., i]
        out[..., 3 + i, 3 + i] = -ra[..., i]
    return out


def local_jacobian(u, s, cache):
    """``dF/dx`` for one instant as a dense ``6N x 6N`` matrix.

    Block ``(n, k)`` is ``<Z_nn><Y_nk>`` for neighbours, ``<Z_nn> D_n`` on the
    diagonal and zero elsewhere.
    """
    n = cache.n_state
    zr = embed(cache.z_nn)
    d = load_partials(u, s)
    ptr, idx, _, yr = cache.neighbours
    jac = np.zeros((6 * n, 6 * n))
    for a in range(n):
        jac[6 * a : 6 * a + 6, 6 * a : 6 * a + 6] = zr[a] @ d[a]
        for e in range(ptr[a], ptr[a + 1]):
            k = idx[e]
            jac[6 * a : 6 * a + 6, 6 * k : 6 * k + 6] = zr[a] @ yr[e]
    return jac


def build_A_hat(u_prev, u_cur, s_prev, s_cur, cache):
    """Block-diagonal ``12N x 12N`` Jacobian of the paired transition."""
    n6 = 6 * cache.n_state
    out = np.zeros((2 * n6, 2 * n6))
    out[:n6, :n6] = local_jacobian(u_prev, s_prev, cache)
    out[n6:, n6:] = local_jacobian(u_cur, s_cur, cache)
    return out


# ---------------------------------------------------------------- output partials


def output_partials(u, meters, n_state):
    """``dG/dx``: ``(B, M, N, 6)`` partials of every meter output.

    A single-phase reading ``|u_i|`` gives ``(alpha_i, beta_i)/|u_i|``; a
    phase-to-phase reading ``|u_i - u_j|`` gives ``+-(Re d, Im d)/|d|``.
    Columns of nodes other than the meter's are zero.
    """
    ph = meters.phasor(u)
    mag = np.abs(ph)
    if np.any(mag == 0):
        raise ZeroMagnitude("a meter output is zero")
    b, m = ph.shape
    out = np.zeros((b, m, n_state, 6))
    cols = np.arange(m)
    ca, cb = ph.real / mag, ph.imag / mag
    out[:, cols, meters.node, meters.i] = ca
    out[:, cols, meters.node, 3 + meters.i] = cb
    two = np.flatnonzero(meters.two_phase)
    out[:, two, meters.node[two], meters.j[two]] -= ca[:, two]
    out[:, two, meters.node[two], 3 + meters.j[two]] -= cb[:, two]
    return out


def b_hat_batch(u_prev, u_cur, resid, meters, n_state):
    """``(B, 2, N, 6)`` right-hand sides of the z recursion."""
    coef = 2.0 / resid.shape[1] * resid
    g_prev = output_partials(u_prev, meters, n_state)
    g_cur = output_partials(u_cur, meters, n_state)
    return np.stack(
        [-np.einsum("bm,bmnk->bnk", coef, g_prev), np.einsum("bm,bmnk->bnk", coef, g_cur)], axis=1
    )


def build_b_hat(u_prev, u_cur, resid, meters, n_state):
    """Dense ``12N`` row vector ``(de/do~)[-dG/dx(t-1), dG/dx(t)]`` for one instant."""
    out = b_hat_batch(u_prev[None], u_cur[None], np.atleast_2d(resid), meters, n_state)
    return out.reshape(-1)


# ---------------------------------------------------------------- parameter partials


def _line_xi_partials(R, X, cond_cap=COND_CAP):
    """``(dG, dB)`` of shape ``(12, 3, 3)`` for one line, one slice per parameter.

    ``G^-1 = R + X R^-1 X`` and ``B = -G X R^-1``, so with
    ``dR^-1 = -R^-1 dR R^-1``:
    ``dG^-1 = dR + dX R^-1 X + X dR^-1 X + X R^-1 dX``, ``dG = -G dG^-1 G`` and
    ``dB = -dG X R^-1 - G dX R^-1 - G X dR^-1``.
    """
    G, B, r_inv = woodbury_parts(R, X, cond_cap)
    dG = np.empty((12, 3, 3))
    dB = np.empty((12, 3, 3))
    zero = np.zeros((3, 3))
    for m in range(12):
        e = sym_elementary(*UPPER[m % 6])
        dR, dX = (e, zero) if m < 6 else (zero, e)
        dr_inv = -r_inv @ dR @ r_inv
        dg_inv = dR + dX @ r_inv @ X + X @ dr_inv @ X + X @ r_inv @ dX
        dG[m] = -G @ dg_inv @ G
        dB[m] = -dG[m] @ X @ r_inv - G @ dX @ r_inv - G @ X @ dr_inv
    return dG, dB


def line_admittance_partials(w, cond_cap=COND_CAP):
    """``dY_l/dw`` as ``(L, 12, 3, 3)`` complex, parameters in vector order."""
    R, X = line_matrices(w)
    out = np.empty((R.shape[0], 12, 3, 3), dtype=complex)
    for li in range(R.shape[0]):
        try:
            dG, dB = _line_xi_partials(R[li], X[li], cond_cap)
        except SingularMatrix as exc:
            raise SingularMatrix(f"line {li}: {exc}") from None
        out[li] = dG + 1j * dB
    return out


def d_xi_d_w(w, cond_cap=COND_CAP):
    """Dense ``12L x 12L`` Jacobian of the admittance vector; block-diagonal per line."""
    dy = line_admittance_partials(w, cond_cap)
    n_lines = dy.shape[0]
    out = np.zeros((12 * n_lines, 12 * n_lines))
    for li in range(n_lines):
        for m in range(12):
            col = 12 * li + m
            for k, (i, j) in enumerate(UPPER):
                out[12 * li + k, col] = dy[li, m, i, j].real
                out[12 * li + 6 + k, col] = dy[li, m, i, j].imag
    return out


def _h_terms(u, s, u0, cache):
    """``h_n = conj(s_n)/conj(u_n) + sum_k Y_nk u_k`` (source included), ``(B, N, 3)``."""
    b, n = u.shape[0], cache.n_state
    rhs = (np.conj(s) / np.conj(u)).reshape(b, 3 * n) + u.reshape(b, 3 * n) @ cache.ynb.T + u0 @ cache.ysrc.T
    return rhs.reshape(b, n, 3)


def d_F_d_xi(u, s, u0, model, cache):
    """Dense ``6N x 12L`` partial of the transition w.r.t. the admittance vector.

    Term by term: ``d<Z_nn>/dxi h_n + <Z_nn> d<Y_nk>/dxi x_k``.  ``Z_nn`` is
    differentiated through its Woodbury split ``A = (G + B G^-1 B)^-1``,
    ``Im Z = -A B G^-1`` with the inverse rule ``d(M^-1) = -M^-1 dM M^-1``.
    """
    n = cache.n_state
    h = _h_terms(u[None], s[None], u0[None], cache)[0]
    inc = incidences(model)
    zr = embed(cache.z_nn)
    out = np.zeros((6 * n, 12 * model.n_lines))
    for e in range(inc.node.size):
        a, li, k = inc.node[e], inc.line[e], inc.other[e]
        g_nn, b_nn = cache.y_nn[a].real, cache.y_nn[a].imag
        g_inv = np.linalg.inv(g_nn)
        a_mat = cache.z_nn[a].real
        x_k = u0 if k < 0 else u[k]
        xk_r = np.concatenate([x_k.real, x_k.imag])
        h_r = np.concatenate([h[a].real, h[a].imag])
        for c in range(12):
            i, j = UPPER[c % 6]
            dmat = sym_elementary(i, j)
            dg, db = (dmat, np.zeros((3, 3))) if c < 6 else (np.zeros((3, 3)), dmat)
            dg_inv = -g_inv @ dg @ g_inv
            d_schur = dg + db @ g_inv @ b_nn + b_nn @ dg_inv @ b_nn + b_nn @ g_inv @ db
            da = -a_mat @ d_schur @ a_mat
            dim = -(da @ b_nn @ g_inv + a_mat @ db @ g_inv + a_mat @ b_nn @ dg_inv)
            dz = embed(da + 1j * dim)
            dy = embed(dg + 1j * db)
            col = 12 * li + c
            # Y_nn moves with every incident line; Y_nk only with this line
            out[6 * a : 6 * a + 6, col] += dz @ h_r + zr[a] @ dy @ xk_r
    return out


def d_F_d_w(u_prev, u_cur, s_prev, s_cur, u0_prev, u0_cur, model, w, cache=None):
    """Dense ``12N x 12L`` paired Jacobian ``dF^/dxi @ dxi/dw``."""
    cache = assemble_admittance(model, w) if cache is None else cache
    dxi = d_xi_d_w(w)
    top = d_F_d_xi(u_prev, s_prev, u0_prev, model, cache) @ dxi
    bottom = d_F_d_xi(u_cur, s_cur, u0_cur, model, cache) @ dxi
    return np.vstack([top, bottom])


# ---------------------------------------------------------------- contracted path


@dataclass(frozen=True)
class Sensitivity:
    """Per-w incidence data: ``P[e, m] = Z_nn dY_l/dw_m`` for incidence ``e = (n, l, k)``."""

    node: np.ndarray
    line: np.ndarray
    other: np.ndarray
    P: np.ndarray  # (E, 12, 3, 3) complex


def sensitivity(model, w, cache):
    inc = incidences(model)
    dy = line_admittance_partials(w)
    P = np.einsum("eij,emjk->emik", cache.z_nn[inc.node], dy[inc.line])
    return Sensitivity(inc.node, inc.line, inc.other, P)


@dataclass
class BackwardDiagnostics:
    z_iterations: np.ndarray
    ratio: np.ndarray  # last ||dz_k|| / ||dz_(k-1)||, a spectral-radius proxy


def z_solve(b_hat, dblk, cache, cfg=DEFAULT_BACKWARD, times=None):
    """Run ``z <- z A^ + b^`` from zero for every instant; ``(z, diagnostics)``."""
    b_hat = np.ascontiguousarray(b_hat, dtype=float)
    dblk = np.ascontiguousarray(dblk, dtype=float)
    n_inst = b_hat.shape[0]
    zr = np.ascontiguousarray(embed(cache.z_nn))
    ptr, idx, _, yr = cache.neighbours
    z = np.empty_like(b_hat)
    iters = np.zeros(n_inst, dtype=np.int64)
    status = np.zeros(n_inst, dtype=np.int64)
    ratio = np.zeros(n_inst)
    kernels.z_recursion(b_hat, dblk, zr, ptr, idx, yr, cfg.eps_backward, cfg.max_iter, cfg.z_cap,
                        z, iters, status, ratio)
    bad = np.flatnonzero(status)
    if bad.size:
        k = bad[0]
        t = None if times is None else int(times[k])
        if status[k] == kernels.DIVERGED:
            raise ZIterationDiverged(f"z iteration exceeded {cfg.z_cap:g}", t=t)
        raise NotConverged(f"z iteration did not converge within {cfg.max_iter} steps", t=t)
    return z, BackwardDiagnostics(iters, ratio)


def _paired(problem, times, u, batch):
    cur = np.searchsorted(times, batch)
    prev = np.searchsorted(times, batch - 1)
    u_pair = np.stack([u[prev], u[cur]], axis=1)
    s_pair = np.stack([problem.s[batch - 1], problem.s[batch]], axis=1)
    u0_pair = np.stack([problem.u0[batch - 1], problem.u0[batch]], axis=1)
    return u_pair, s_pair, u0_pair


def per_instant_gradient(z, u_pair, s_pair, u0_pair, cache, sens, n_lines):
    """``z . dF^/dw`` for each instant, ``(B, 12L)``."""
    b, n = u_pair.shape[0], cache.n_state
    f = _h_terms(u_pair.reshape(2 * b, n, 3), s_pair.reshape(2 * b, n, 3), u0_pair.reshape(2 * b, 3), cache)
    f = np.einsum("nij,bnj->bni", cache.z_nn, f).reshape(b, 2, n, 3)
    u_ext = np.concatenate([u_pair, u0_pair[:, :, None, :]], axis=2)  # source at index N (= -1)
    other = np.where(sens.other < 0, n, sens.other)
    v = u_ext[:, :, other] - f[:, :, sens.node]  # (B, 2, E, 3)
    zc = z[..., :3] + 1j * z[..., 3:]
    zc = zc[:, :, sens.node]  # (B, 2, E, 3)
    contrib = np.einsum("bhei,emij,bhej->bem", np.conj(zc), sens.P, v).real
    out = np.zeros((b, n_lines, 12))
    np.add.at(out, (slice(None), sens.line), contrib)
    return out.reshape(b, 12 * n_lines)


@dataclass
class GradientResult:
    loss: float
    grad: np.ndarray
    per_instant: np.ndarray
    diagnostics: BackwardDiagnostics


def loss_and_gradient(problem, w, batch, cfg=DEFAULT_BACKWARD, cache=None, sens=None, store=None):
    """Batch loss ``e_w`` and its gradient, one z recursion per instant."""
    model = problem.model
    cache = assemble_admittance(model, w) if cache is None else cache
    sens = sensitivity(model, w, cache) if sens is None else sens
    batch = np.asarray(batch, dtype=int)
    times, u, _, resid = error_terms(problem, cache, batch, store)
    u_pair, s_pair, u0_pair = _paired(problem, times, u, batch)
    n = cache.n_state
    bh = b_hat_batch(u_pair[:, 0], u_pair[:, 1], resid, problem.meters, n)
    dblk = load_partials(u_pair, s_pair)
    z, diag = z_solve(bh, dblk, cache, cfg, times=batch)
    per = per_instant_gradient(z, u_pair, s_pair, u0_pair, cache, sens, model.n_lines)
    return GradientResult(float(np.mean(np.mean(resid**2, axis=1))), per.mean(axis=0), per, diag)


def backward_gradient(problem, w, batch, cfg=DEFAULT_BACKWARD, cache=None):
    """Mean over ``batch`` of ``de_w(t)/dw`` in parameter-vector order."""
    return loss_and_gradient(problem, w, batch, cfg, cache).grad
