"""Complex-to-real block embedding and the Woodbury-split complex inverse.

Complex matrices are ordinary numpy complex arrays.  All functions accept a
stack of matrices (leading batch dimensions) as well as a single matrix.
"""

import numpy as np

from .errors import IndexOutOfRange, SingularMatrix

COND_CAP = 1e12


def embed(a):
    """Return the real block form ``[[Re A, -Im A], [Im A, Re A]]``.

    For ``a`` of shape ``(..., n, n)`` the result has shape ``(..., 2n, 2n)``.
    The map is a ring homomorphism, so ``embed(A @ B) == embed(A) @ embed(B)``
    and a complex vector ``u`` corresponds to ``[Re u; Im u]``.
    """
    a = np.asarray(a)
    re, im = a.real, a.imag
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def unembed(m):
    """Inverse of :func:`embed`: read ``A`` back from the left block column."""
    m = np.asarray(m)
    n = m.shape[-1] // 2
    return m[..., :n, :n] + 1j * m[..., n:, :n]


def _norm1(a):
    return np.max(np.sum(np.abs(a), axis=-2), axis=-1)


def _checked_inv(a, what, cond_cap):
    # 1-norm condition number ||A|| ||A^-1||: as telling as the 2-norm one
    # here and it reuses the inverse instead of an extra SVD
    try:
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        raise SingularMatrix(f"{what} is singular") from None
    cond = _norm1(a) * _norm1(inv)
    if not np.all(np.isfinite(cond)) or np.any(cond > cond_cap):
        raise SingularMatrix(f"{what} is singular (condition number {np.max(cond):.3g})")
    return inv


def woodbury_parts(re, im, cond_cap=COND_CAP):
    """Real and imaginary parts of ``(re + j im)^-1`` via the Woodbury split.

    ``(A + jB)^-1 = (A + B A^-1 B)^-1 - j (A + B A^-1 B)^-1 B A^-1``.  Both
    ``A`` and ``A + B A^-1 B`` must be nonsingular; the function raises
    :class:`SingularMatrix` otherwise instead of switching method.

    Returns ``(inv_re, inv_im, a_inv)`` so callers that differentiate the
    split can reuse ``A^-1``.
    """
    re = np.asarray(re, dtype=float)
    im = np.asarray(im, dtype=float)
    a_inv = _checked_inv(re, "real part", cond_cap)
    schur = re + im @ a_inv @ im
    inv_re = _checked_inv(schur, "A + B A^-1 B", cond_cap)
    inv_im = -inv_re @ im @ a_inv
    return inv_re, inv_im, a_inv


def complex_inverse(a, cond_cap=COND_CAP, refine=1):
    """Invert a complex matrix (or stack) through :func:`woodbury_parts`.

    The split amplifies rounding by the conditioning of ``Re(A)`` as well as
    of ``A``.  Each of the ``refine`` steps ``X <- X + (I - X A) X`` squares
    the residual ``I - X A``, bringing it down to what a direct complex
    inverse achieves.
    """
    a = np.asarray(a)
    inv_re, inv_im, _ = woodbury_parts(a.real, a.imag, cond_cap)
    x = inv_re + 1j * inv_im
    eye = np.eye(a.shape[-1])
    for _ in range(refine):
        x = x + (eye - x @ a) @ x
    return x


def elementary(i, j, n, m=None):
    """``n x m`` zero matrix with a single 1 at zero-based position ``(i, j)``."""
    m = n if m is None else m
    if not (0 <= i < n and 0 <= j < m):
        raise IndexOutOfRange(f"({i}, {j}) outside a {n}x{m} matrix")
    e = np.zeros((n, m))
    e[i, j] = 1.0
    return e


def sym_elementary(i, j, n=3):
    """Derivative of a symmetric matrix w.r.t. its shared ``(i, j)`` entry.

    ``E^(i,i)`` on the diagonal, ``E^(i,j) + E^(j,i)`` off it.
    """
    e = elementary(i, j, n)
    if i != j:
        e = e + e.T
    return e


def d_inverse_entry(inv, i, j, d_mat):
    """Derivative of entry ``(i, j)`` of ``M^-1`` along a perturbation ``dM``.

    Trace chain rule with ``d(M^-1)_ij / dM = -M^-T E^(i,j) M^-T``:
    ``Tr([-M^-T E M^-T]^T dM)``.
    """
    n = inv.shape[-1]
    grad = -inv.T @ elementary(i, j, n) @ inv.T
    return np.trace(grad.T @ d_mat)


def d_inverse(inv, d_mat):
    """Entrywise trace-chain-rule derivative of ``M^-1`` along ``dM``."""
    n = inv.shape[-1]
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = d_inverse_entry(inv, i, j, d_mat)
    return out
