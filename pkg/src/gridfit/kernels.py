"""Compiled inner loops for the fixed-point power flow and the z recursion.

Both loops are per-instant and run thousands of tiny 3x3 / 6x6 block
products, which is pure interpreter overhead in numpy.  Status codes:
0 converged, 1 iteration cap hit, 2 diverged, 3 zero voltage.
"""

import numpy as np
from numba import njit

OK, NOT_CONVERGED, DIVERGED, ZERO_VOLTAGE = 0, 1, 2, 3


@njit(cache=True, inline="always")
def _abs2(x):
    return x.real * x.real + x.imag * x.imag


@njit(cache=True, fastmath={"contract", "reassoc", "nsz", "arcp"})
def _mat3_vec(m, v, out):
    for i in range(3):
        out[i] = m[i, 0] * v[0] + m[i, 1] * v[1] + m[i, 2] * v[2]


@njit(cache=True)
def _max_mismatch(s, u, u0, ynn, ysrc, nbr_ptr, nbr_idx, nbr_y):
    n_nodes = u.shape[0]
    cur = np.empty(3, dtype=np.complex128)
    tmp = np.empty(3, dtype=np.complex128)
    worst = 0.0
    for n in range(n_nodes):
        _mat3_vec(ynn[n], u[n], cur)
        _mat3_vec(ysrc[n], u0, tmp)
        for i in range(3):
            cur[i] -= tmp[i]
        for e in range(nbr_ptr[n], nbr_ptr[n + 1]):
            _mat3_vec(nbr_y[e], u[nbr_idx[e]], tmp)
            for i in range(3):
                cur[i] -= tmp[i]
        for i in range(3):
            r = abs(s[n, i] - u[n, i] * np.conj(cur[i]))
            if r > worst:
                worst = r
    return worst


@njit(cache=True, fastmath={"contract", "reassoc", "nsz", "arcp"})
def fixed_point(s, u0, u_init, znn, ynn, ysrc, nbr_ptr, nbr_idx, nbr_y,
                eps, max_iter, cap, theta, mismatch_tol, out, iters, status):
    n_inst, n_nodes = s.shape[0], s.shape[1]
    rhs = np.empty(3, dtype=np.complex128)
    tmp = np.empty(3, dtype=np.complex128)
    nv = np.empty(3, dtype=np.complex128)
    src = np.empty((n_nodes, 3), dtype=np.complex128)
    for b in range(n_inst):
        u = u_init[b].copy()
        new = np.empty_like(u)
        # the source term is constant over the sweeps of one instant
        for n in range(n_nodes):
            _mat3_vec(ysrc[n], u0[b], tmp)
            for i in range(3):
                src[n, i] = tmp[i]
        src2 = 0.0
        for i in range(3):
            src2 += _abs2(u0[b, i])
        start2 = src2
        for n in range(n_nodes):
            for i in range(3):
                start2 += _abs2(u[n, i])
        st = NOT_CONVERGED
        done_it = max_iter
        for it in range(1, max_iter + 1):
            d2 = 0.0
            prev2 = src2
            new2 = src2
            zero = False
            for n in range(n_nodes):
                for i in range(3):
                    if u[n, i] == 0:
                        zero = True
                    else:
                        rhs[i] = np.conj(s[b, n, i]) / np.conj(u[n, i]) + src[n, i]
                if zero:
                    break
                for e in range(nbr_ptr[n], nbr_ptr[n + 1]):
                    _mat3_vec(nbr_y[e], u[nbr_idx[e]], tmp)
                    for i in range(3):
                        rhs[i] += tmp[i]
                _mat3_vec(znn[n], rhs, nv)
                for i in range(3):
                    x = nv[i]
                    if theta != 1.0:
                        x = theta * x + (1.0 - theta) * u[n, i]
                    new[n, i] = x
                    d2 += _abs2(x - u[n, i])
                    prev2 += _abs2(u[n, i])
                    new2 += _abs2(x)
            if zero:
                st = ZERO_VOLTAGE
                done_it = it
                break
            u, new = new, u
            if not np.isfinite(new2) or new2 > cap * cap * start2:
                st = DIVERGED
                done_it = it
                break
            if d2 < eps * prev2 or d2 == 0.0:
                if mismatch_tol <= 0.0 or _max_mismatch(s[b], u, u0[b], ynn, ysrc, nbr_ptr, nbr_idx, nbr_y) < mismatch_tol:
                    st = OK
                    done_it = it
                    break
        out[b] = u
        iters[b] = done_it
        status[b] = st


@njit(cache=True)
def z_recursion(b_hat, dblk, zr, nbr_ptr, nbr_idx, nbr_yr, eps, max_iter, cap,
                out, iters, status, ratio):
    """``z <- z A + b`` per instant, with ``A`` given blockwise.

    ``b_hat``: ``(B, 2, N, 6)``; ``dblk``: ``(B, 2, N, 6, 6)`` load-term
    partials; ``zr``: real ``<Z_nn>`` blocks; ``nbr_yr``: ``<Y_nk>`` blocks in
    the node adjacency.  Row ``n``/column ``k`` of a half of ``A`` is
    ``<Z_nn><Y_nk>`` off the diagonal and ``<Z_nn> D_n`` on it.
    """
    n_inst, n_nodes = b_hat.shape[0], b_hat.shape[2]
    w = np.empty((n_nodes, 6))
    for b in range(n_inst):
        z = np.zeros((2, n_nodes, 6))
        new = np.empty_like(z)
        st = NOT_CONVERGED
        done_it = max_iter
        last_d2 = 0.0
        rho = 0.0
        for it in range(1, max_iter + 1):
            d2 = 0.0
            prev2 = 0.0
            new2 = 0.0
            for h in range(2):
                for n in range(n_nodes):
                    for j in range(6):
                        acc = 0.0
                        for i in range(6):
                            acc += z[h, n, i] * zr[n, i, j]
                        w[n, j] = acc
                for k in range(n_nodes):
                    for j in range(6):
                        acc = b_hat[b, h, k, j]
                        for i in range(6):
                            acc += w[k, i] * dblk[b, h, k, i, j]
                        for e in range(nbr_ptr[k], nbr_ptr[k + 1]):
                            n = nbr_idx[e]
                            for i in range(6):
                                acc += w[n, i] * nbr_yr[e, i, j]
                        new[h, k, j] = acc
                        d2 += (acc - z[h, k, j]) ** 2
                        prev2 += z[h, k, j] ** 2
                        new2 += acc * acc
            z, new = new, z
            if last_d2 > 0.0:
                rho = np.sqrt(d2 / last_d2)
            last_d2 = d2
            if not np.isfinite(new2) or new2 > cap * cap:
                st = 2
                done_it = it
                break
            if d2 < eps * prev2 or d2 == 0.0:
                st = OK
                done_it = it
                break
        out[b] = z
        iters[b] = done_it
        status[b] = st
        ratio[b] = rho
