"""Fixed-step matrix ODE integration on the problem grid.

All flows use classical RK4 with the grid step.  Stage values at
``t_k + h/2`` need coefficients between nodes, so coefficient arrays live on
the "half grid" (nodes and midpoints interleaved, length ``2N + 1``).  The
standard Riccati solution P is only known at nodes; its midpoint values are
filled in by cubic Hermite interpolation using the ODE right-hand side, which
keeps the fourth-order accuracy of anything integrated downstream of P.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kalman import FilterCovarianceSolution
from .matrixkit import DEFAULT_TOL, numerical_rank, pinv, sym
from .problem import ProblemSpec, TimeGrid

ESCAPE_NORM = 1e12


class FiniteEscapeError(ArithmeticError):
    """A Riccati flow left every reasonable bound before reaching the end of the grid."""


def rk4_matrix(
    rhs: Callable[[int, np.ndarray], np.ndarray],
    start: np.ndarray,
    steps: int,
    h: float,
    *,
    backward: bool = False,
    symmetric: bool = False,
    psd: bool = False,
    label: str = "ODE",
    grid: TimeGrid | None = None,
) -> np.ndarray:
    """Integrate ``dM/dt = rhs(slot, M)`` over the grid, returning node values.

    ``slot`` indexes the half grid: ``2k`` is node ``k`` and ``2k + 1`` the
    midpoint between nodes ``k`` and ``k + 1``.  With ``backward=True`` the
    integration starts from node ``steps`` and the result is still indexed by
    node (``out[steps] == start``).  ``psd=True`` projects each step onto the
    PSD cone, for flows whose exact solution is known to stay there.
    """
    out = np.empty((steps + 1, *start.shape))
    M = np.array(start, dtype=float)
    if backward:
        k = steps
        out[k] = M
        dt = -h
        for k in range(steps, 0, -1):
            s = 2 * k
            k1 = rhs(s, M)
            k2 = rhs(s - 1, M + 0.5 * dt * k1)
            k3 = rhs(s - 1, M + 0.5 * dt * k2)
            k4 = rhs(s - 2, M + dt * k3)
            M = M + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if symmetric:
                M = _project_psd(M) if psd else sym(M)
            _check_escape(M, k - 1, label, grid)
            out[k - 1] = M
    else:
        out[0] = M
        for k in range(steps):
            s = 2 * k
            k1 = rhs(s, M)
            k2 = rhs(s + 1, M + 0.5 * h * k1)
            k3 = rhs(s + 1, M + 0.5 * h * k2)
            k4 = rhs(s + 2, M + h * k3)
            M = M + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if symmetric:
                M = _project_psd(M) if psd else sym(M)
            _check_escape(M, k + 1, label, grid)
            out[k + 1] = M
    return out


def _project_psd(M: np.ndarray) -> np.ndarray:
    M = sym(M)
    if not np.all(np.isfinite(M)):
        return M
    lam, V = np.linalg.eigh(M)
    if lam[0] >= 0.0:
        return M
    # Nearest PSD matrix in Frobenius norm; only truncation error is removed.
    return sym((V * np.clip(lam, 0.0, None)) @ V.T)


def _check_escape(M: np.ndarray, node: int, label: str, grid: TimeGrid | None) -> None:
    norm = float(np.sqrt(np.vdot(M, M)))
    if not norm <= ESCAPE_NORM:  # also catches NaN
        norm = norm if np.isfinite(norm) else np.inf
        when = f" at t={grid.nodes[node]:.6g}" if grid is not None else ""
        raise FiniteEscapeError(f"finite escape in {label}: norm {norm:.3e} at node {node}{when}")


def quadrature_weights(steps: int, h: float) -> np.ndarray:
    """Composite Simpson weights when ``steps`` is even, trapezoid otherwise."""
    w = np.full(steps + 1, h)
    if steps % 2 == 0:
        w[1:-1:2] = 4.0 * h / 3.0
        w[2:-1:2] = 2.0 * h / 3.0
        w[0] = w[-1] = h / 3.0
    else:
        w[0] = w[-1] = h / 2.0
    return w


def hermite_midpoints(M: np.ndarray, Mdot: np.ndarray, h: float) -> np.ndarray:
    """Interleave node values with cubic Hermite midpoint values."""
    out = np.empty((2 * M.shape[0] - 1, *M.shape[1:]))
    out[0::2] = M
    out[1::2] = 0.5 * (M[:-1] + M[1:]) + (h / 8.0) * (Mdot[:-1] - Mdot[1:])
    return out


def pinv_half_grid(spec: ProblemSpec, tol: float = DEFAULT_TOL) -> np.ndarray:
    """R^+ on the half grid; warns if the rank of R changes along the horizon."""
    R = spec.R.on_half_nodes(spec.grid)
    if spec.R.is_constant:
        Rp = pinv(R[0], tol)
        return np.repeat(Rp[None], R.shape[0], axis=0)
    ranks = {numerical_rank(Rk, tol) for Rk in R}
    if len(ranks) > 1:
        warnings.warn(f"rank of R varies along the horizon: {sorted(ranks)}", RuntimeWarning, stacklevel=2)
    return np.stack([pinv(Rk, tol) for Rk in R])


@dataclass(frozen=True)
class RiccatiSolution:
    """Solution of the standard Riccati equation with P(T) = H."""

    grid: TimeGrid
    P: np.ndarray
    Pdot: np.ndarray

    @property
    def P0(self) -> np.ndarray:
        return self.P[0]

    def on_half_nodes(self) -> np.ndarray:
        return hermite_midpoints(self.P, self.Pdot, self.grid.h)


def solve_P(spec: ProblemSpec, tol: float = DEFAULT_TOL) -> RiccatiSolution:
    """Integrate ``0 = P' + A'P + PA + Q - P B R^+ B' P`` backward from H."""
    g = spec.grid
    A = spec.A.on_half_nodes(g)
    B = spec.B.on_half_nodes(g)
    Q = spec.Q.on_half_nodes(g)
    S = B @ pinv_half_grid(spec, tol) @ np.swapaxes(B, 1, 2)

    def rhs(slot, P):
        AtP = A[slot].T @ P
        return -(AtP + AtP.T + Q[slot] - P @ S[slot] @ P)

    P = rk4_matrix(rhs, sym(spec.H), g.steps, g.h, backward=True, symmetric=True, psd=True, label="P", grid=g)
    Pdot = np.stack([rhs(2 * k, P[k]) for k in range(g.steps + 1)])
    return RiccatiSolution(g, P, Pdot)


@dataclass(frozen=True)
class P1Solution:
    """Backward solution of the companion equation for P1 and its constraint residual.

    ``d4_residuals[k]`` is ``||C0(t_k) + B0'(t_k) P1(t_k)||`` (spectral norm).
    """

    grid: TimeGrid
    P1: np.ndarray
    terminal_value: np.ndarray
    d4_residuals: np.ndarray

    @property
    def d4_residual(self) -> float:
        return float(self.d4_residuals.max()) if self.d4_residuals.size else 0.0


def d4_residuals(ops, P1: np.ndarray) -> np.ndarray:
    """Per-node norm of ``C0 + B0' P1`` (zero when the complement is empty)."""
    if ops.C0.shape[1] == 0:
        return np.zeros(P1.shape[0])
    res = ops.C0 + np.swapaxes(ops.B0, 1, 2) @ P1
    return np.linalg.norm(res, ord=2, axis=(1, 2))


def solve_P1(spec: ProblemSpec, ops, P1T) -> P1Solution:
    """Integrate ``0 = P1' + P1 A0 + A0' P1 + P1 D0 P1`` backward from ``P1T``."""
    g = spec.grid
    P1T = sym(np.asarray(P1T, dtype=float).reshape(spec.n, spec.n))
    A0, D0 = ops.A0_half, ops.D0_half

    def rhs(slot, X):
        XA = X @ A0[slot]
        return -(XA + XA.T + X @ D0[slot] @ X)

    P1 = rk4_matrix(rhs, P1T, g.steps, g.h, backward=True, symmetric=True, label="P1", grid=g)
    return P1Solution(g, P1, P1T, d4_residuals(ops, P1))


def solve_filter_covariance(spec: ProblemSpec) -> FilterCovarianceSolution:
    """Forward filter Riccati from Sigma0 and the gain ``L = Phat C' (GG')^-1``."""
    g = spec.grid
    A = spec.A.on_half_nodes(g)
    C = spec.C.on_half_nodes(g)
    D = spec.D.on_half_nodes(g)
    G = spec.G.on_half_nodes(g)
    W = D @ np.swapaxes(D, 1, 2)
    GGinv = np.linalg.inv(G @ np.swapaxes(G, 1, 2))
    CtVC = np.swapaxes(C, 1, 2) @ GGinv @ C

    def rhs(slot, X):
        AX = A[slot] @ X
        return AX + AX.T + W[slot] - X @ CtVC[slot] @ X

    Phat = rk4_matrix(rhs, sym(spec.sigma0), g.steps, g.h, symmetric=True, psd=True,
                       label="filter covariance", grid=g)
    L = Phat @ np.swapaxes(C[0::2], 1, 2) @ GGinv[0::2]
    return FilterCovarianceSolution(g, Phat, L)


@dataclass(frozen=True)
class TransitionSolution:
    """``P2[k] = P2(t0, t_k)`` for the transition of ``x' = -A0' x``."""

    grid: TimeGrid
    P2: np.ndarray


def transition_P2(ops, grid: TimeGrid) -> TransitionSolution:
    """Tabulate ``s -> P2(t0, s)``.

    With ``P2(t, s) = Psi(t) Psi(s)^-1`` for a fundamental matrix of
    ``x' = -A0'(t) x``, the map ``X(s) = P2(t0, s)`` satisfies
    ``X' = X A0'(s)`` with ``X(t0) = I``, integrated forward.
    """
    A0 = ops.A0_half
    n = A0.shape[1]
    P2 = rk4_matrix(lambda slot, X: X @ A0[slot].T, np.eye(n), grid.steps, grid.h, label="P2", grid=grid)
    return TransitionSolution(grid, P2)


@dataclass(frozen=True)
class Gramian:
    G1: np.ndarray
    t0: float
    T: float


def gramian_G1(ops, P2: TransitionSolution, grid: TimeGrid, upto_node: int | None = None) -> Gramian:
    """Quadrature of ``P2(t0,s) C0'(s) C0(s) P2'(t0,s)`` over ``[t0, t_upto]``."""
    k = grid.steps if upto_node is None else int(upto_node)
    n = P2.P2.shape[1]
    if k == 0:
        return Gramian(np.zeros((n, n)), grid.t0, grid.t0)
    X = P2.P2[: k + 1]
    C0 = ops.C0[: k + 1]
    M = X @ np.swapaxes(C0, 1, 2)
    integrand = M @ np.swapaxes(M, 1, 2)
    w = quadrature_weights(k, grid.h)
    G1 = sym(np.tensordot(w, integrand, axes=1))
    return Gramian(G1, grid.t0, float(grid.nodes[k]))
