"""Dense linear-algebra helpers for bilinear EDMDc.

Only what the identification and control layers need: Kronecker products of
input/observable vectors, a truncated-SVD pseudoinverse and the
minimum-norm least-squares solve ``W = Y A^+``.
"""

from __future__ import annotations

import numpy as np

DEFAULT_RCOND = 1e-12


class SVDConvergenceError(np.linalg.LinAlgError):
    """Raised when LAPACK's SVD driver fails to converge."""

    def __init__(self, shape: tuple[int, ...], detail: str):
        self.shape = shape
        self.detail = detail
        super().__init__(f"SVD did not converge for matrix of shape {shape}: {detail}")


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


def kron_vec(u, z) -> np.ndarray:
    """Return ``u ⊗ z``; entry ``i*len(z) + j`` is ``u[i] * z[j]``."""
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    return (u[:, None] * z[None, :]).ravel()


def kron_cols(U: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product of ``U`` (m×T) and ``Z`` (N×T).

    Column ``t`` of the result equals ``kron_vec(U[:, t], Z[:, t])``.
    """
    U = np.asarray(U, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if U.shape[1] != Z.shape[1]:
        raise ValueError(f"column mismatch: U has {U.shape[1]}, Z has {Z.shape[1]}")
    m, T = U.shape
    return (U[:, None, :] * Z[None, :, :]).reshape(m * Z.shape[0], T)


def pinv(M, tol: float = DEFAULT_RCOND) -> np.ndarray:
    """Moore-Penrose pseudoinverse by full SVD.

    Singular values at or below ``tol * sigma_max`` are treated as zero.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    _check_finite("M", M)
    try:
        Us, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SVDConvergenceError(M.shape, str(exc)) from exc
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((M.shape[1], M.shape[0]))
    keep = s > tol * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ Us.T


def lstsq_min_norm(A, Y, tol: float = DEFAULT_RCOND) -> np.ndarray:
    """Solve ``W A ≈ Y`` for the minimum-Frobenius-norm minimizer ``W = Y A^+``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if A.shape[1] != Y.shape[1]:
        raise ValueError(
            f"W·A ≈ Y needs equal column counts; got A {A.shape}, Y {Y.shape}"
        )
    _check_finite("Y", Y)
    return Y @ pinv(A, tol)
