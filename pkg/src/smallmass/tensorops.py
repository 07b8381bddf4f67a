"""Dense linear-algebra kernels for small systems.

Every function accepts stacks of matrices: the trailing two axes are the
matrix, any leading axes are batch axes (typically one entry per Monte Carlo
path).
"""

from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import LyapunovError, MatExpRangeError, SingularMatrixError

MAX_ORDER = 16


def mat_exp(A, s=1.0):
    """Return ``exp(s * A)`` for a (stack of) square matrices."""
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    if n > MAX_ORDER:
        raise ValueError(f"mat_exp targets n <= {MAX_ORDER}, got {n}")
    sA = s * A
    with np.errstate(over="ignore", invalid="ignore"):
        if n == 1:
            out = np.exp(sA)
        else:
            out = scipy.linalg.expm(sA)
    if not np.all(np.isfinite(out)):
        raise MatExpRangeError("matrix exponential overflowed")
    return out


def inv_derivative(A, dA, A_inv=None):
    """Derivative of ``inv(A)`` along the direction ``dA``: ``-A^-1 dA A^-1``."""
    if A_inv is None:
        A_inv = safe_inv(A)
    return -A_inv @ dA @ A_inv


def safe_inv(A):
    A = np.asarray(A, dtype=float)
    if A.shape[-1] == 1:
        if np.any(A == 0.0):
            raise SingularMatrixError("singular 1x1 matrix")
        return 1.0 / A
    try:
        out = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from None
    if not np.all(np.isfinite(out)):
        raise SingularMatrixError("matrix inverse is not finite")
    return out


@lru_cache(maxsize=None)
def _sym_basis(n):
    iu = np.triu_indices(n)
    N = len(iu[0])
    basis = np.zeros((N, n, n))
    for a, (i, j) in enumerate(zip(*iu)):
        basis[a, i, j] = 1.0
        basis[a, j, i] = 1.0
    return iu, basis


def lyapunov_operator(Gamma):
    """Matrix of ``M -> Gamma M + M Gamma^T`` on the upper-triangular unknowns of a symmetric M."""
    Gamma = np.asarray(Gamma, dtype=float)
    n = Gamma.shape[-1]
    iu, basis = _sym_basis(n)
    GB = np.einsum("...ik,bkj->...bij", Gamma, basis)
    image = GB + np.swapaxes(GB, -1, -2)
    # rows: upper-triangular entries of the image; columns: basis element
    return np.swapaxes(image[..., iu[0], iu[1]], -1, -2)


def _unpack_sym(x, n):
    iu, _ = _sym_basis(n)
    M = np.zeros(x.shape[:-1] + (n, n))
    M[..., iu[0], iu[1]] = x
    M[..., iu[1], iu[0]] = x
    return M


def _check_gamma(Gamma):
    sym = 0.5 * (Gamma + np.swapaxes(Gamma, -1, -2))
    if Gamma.shape[-1] == 1:
        floor = sym[..., 0, 0]
    else:
        floor = np.linalg.eigvalsh(sym)[..., 0]
    if np.any(~(floor > 0.0)):
        raise LyapunovError("symmetric part of Gamma is not positive definite")


def solve_lyapunov_many(Gamma, syms, check=True):
    """Solve ``Gamma M + M Gamma^T = S`` for several symmetric right-hand sides at once.

    ``syms`` has shape ``batch + (r, n, n)``; the result has the same shape.
    One factorisation of the operator per batch entry is shared by the r solves.
    """
    Gamma = np.asarray(Gamma, dtype=float)
    syms = np.asarray(syms, dtype=float)
    n = Gamma.shape[-1]
    if check:
        _check_gamma(Gamma)
    if n == 1:
        return syms / (2.0 * Gamma[..., None, :, :])
    iu, _ = _sym_basis(n)
    L = lyapunov_operator(Gamma)
    rhs = np.swapaxes(syms[..., iu[0], iu[1]], -1, -2)  # batch + (N, r)
    batch = np.broadcast_shapes(L.shape[:-2], rhs.shape[:-2])
    L = np.broadcast_to(L, batch + L.shape[-2:])
    rhs = np.broadcast_to(rhs, batch + rhs.shape[-2:])
    try:
        x = np.linalg.solve(L, rhs)
    except np.linalg.LinAlgError as exc:
        raise LyapunovError(str(exc)) from None
    return _unpack_sym(np.swapaxes(x, -1, -2), n)


def solve_lyapunov(Gamma, Sym, check=True):
    """Return the symmetric M with ``Gamma M + M Gamma^T = Sym``.

    Equivalently ``M = int_0^inf exp(-z Gamma) Sym exp(-z Gamma^T) dz``.
    """
    Sym = np.asarray(Sym, dtype=float)
    return solve_lyapunov_many(Gamma, Sym[..., None, :, :], check=check)[..., 0, :, :]


def lyap_derivative(Gamma, dGamma, Sym, dSym, M, check=False):
    """Directional derivative of the Lyapunov solution M(Gamma, Sym).

    Solves ``Gamma dM + dM Gamma^T = dSym - dGamma M - M dGamma^T``.
    """
    rhs = np.asarray(dSym, dtype=float) - dGamma @ M - M @ np.swapaxes(dGamma, -1, -2)
    rhs = 0.5 * (rhs + np.swapaxes(rhs, -1, -2))
    return solve_lyapunov(Gamma, rhs, check=check)
