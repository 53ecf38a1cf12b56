"""Tolerance-aware dense linear algebra used throughout the package.

Every rank decision is relative: a singular value (or eigenvalue) ``s`` is
treated as zero when ``|s| <= tol * s_max``.  The default ``tol`` is
``DEFAULT_TOL`` and every public function accepts an override, since the
regular/irregular dichotomy is ultimately a rank decision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

DEFAULT_TOL = 1e-10


class NotPSDError(ValueError):
    """Raised when a matrix expected to be positive semi-definite is not."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float array.

    Scalars become 1x1 and 1-D input becomes a column.  NaN or Inf entries
    are rejected with ``ValueError``.
    """
    a = np.array(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: entries must be finite")
    return a


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetric part (M + M')/2 of a square matrix or a stack of them."""
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def numerical_rank(M: np.ndarray, tol: float = DEFAULT_TOL) -> int:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def pinv(M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Moore-Penrose inverse with a relative singular-value cutoff.

    Singular values below ``tol * sigma_max`` are dropped.  The zero matrix
    (and any empty matrix) maps to the zero matrix of transposed shape.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros(M.shape[::-1])
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros(M.shape[::-1])
    keep = s > tol * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def range_residual(X, Y, tol: float = DEFAULT_TOL) -> float:
    """Norm of the part of ``X`` lying outside the column space of ``Y``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.size == 0:
        return 0.0
    if Y.size == 0:
        return float(np.linalg.norm(X, 2))
    proj = Y @ pinv(Y, tol)
    return float(np.linalg.norm(X - proj @ X, 2))


def range_included(X, Y, tol: float = DEFAULT_TOL) -> bool:
    """True iff every column of ``X`` lies in Range(Y).

    The test is ``||(I - Y Y^+) X|| <= tol * (1 + ||X||)`` in the spectral
    norm, with the same ``tol`` used for the rank cutoff inside ``Y^+``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row mismatch: X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if X.size == 0:
        return True
    return range_residual(X, Y, tol) <= tol * (1.0 + np.linalg.norm(X, 2))


def _sign_normalize(V: np.ndarray) -> np.ndarray:
    # Make the largest-magnitude entry of each column positive (deterministic bases).
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def check_psd(M, tol: float = DEFAULT_TOL, name: str = "matrix") -> None:
    """Raise ``NotPSDError`` unless ``M`` is symmetric PSD within ``tol``."""
    M = np.asarray(M, dtype=float)
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if M.size and np.max(np.abs(M - M.T)) > 1e-8 * scale:
        raise NotPSDError(f"{name} is not symmetric")
    if M.size:
        lam_min = float(np.linalg.eigvalsh(sym(M))[0])
        if lam_min < -max(tol, 1e-8) * scale:
            raise NotPSDError(f"{name} is not positive semi-definite (min eigenvalue {lam_min:.3e})")


@dataclass(frozen=True)
class RankFactorization:
    """Row transformation splitting off the null space of a PSD weight R.

    ``T0 @ (I - R^+ R)`` has its first ``m0`` rows zero and ``Upsilon`` below;
    ``G0`` is the right ``m - m0`` column block of ``inv(T0)``.
    """

    m0: int
    T0: np.ndarray
    Upsilon: np.ndarray
    G0: np.ndarray

    @property
    def T0_inv(self) -> np.ndarray:
        # T0 is orthogonal by construction.
        return self.T0.T


def rank_factorize_complement(R, tol: float = DEFAULT_TOL) -> RankFactorization:
    """Factor the projector ``I - R^+ R`` through an orthogonal ``T0``.

    ``T0`` comes from a column-pivoted QR of the projector: the leading
    ``m - m0`` columns of Q span the null space of R, so stacking the
    remaining columns first gives ``T0 (I - R^+ R) = [0; Upsilon]``.
    """
    R = as_matrix(R, "R")
    m = R.shape[0]
    if R.shape != (m, m):
        raise ValueError(f"R must be square, got {R.shape}")
    check_psd(R, tol, "R")
    m0 = numerical_rank(R, tol)
    k = m - m0
    N = np.eye(m) - pinv(R, tol) @ R
    if k == 0:
        return RankFactorization(m0, np.eye(m), np.zeros((0, m)), np.zeros((m, 0)))
    Q, _, _ = sla.qr(N, pivoting=True)
    null_basis = _sign_normalize(Q[:, :k])
    T0 = np.vstack([Q[:, k:].T, null_basis.T])
    Upsilon = (T0 @ N)[m0:]
    return RankFactorization(m0, T0, Upsilon, null_basis)


@dataclass(frozen=True)
class CongruenceDecomposition:
    """``T1cal' P1 T1cal = blockdiag(Phat_block, 0)`` with ``Phat_block`` r x r."""

    T1cal: np.ndarray
    Phat_block: np.ndarray
    r: int


def congruence_diag(P1, tol: float = DEFAULT_TOL) -> CongruenceDecomposition:
    """Orthogonal congruence isolating the nonsingular part of symmetric ``P1``.

    Eigenvectors of the nonzero eigenvalues come first (in ``eigh`` order),
    followed by a basis of the null space.
    """
    P1 = as_matrix(P1, "P1")
    n = P1.shape[0]
    lam, V = np.linalg.eigh(sym(P1))
    lam_max = float(np.max(np.abs(lam))) if n else 0.0
    nz = np.abs(lam) > tol * lam_max if lam_max > 0 else np.zeros(n, dtype=bool)
    r = int(np.count_nonzero(nz))
    if r == 0:
        return CongruenceDecomposition(np.eye(n), np.zeros((0, 0)), 0)
    T1 = _sign_normalize(np.hstack([V[:, nz], V[:, ~nz]]))
    return CongruenceDecomposition(T1, np.diag(lam[nz]), r)
