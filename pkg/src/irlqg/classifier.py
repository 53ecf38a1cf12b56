"""Regular/irregular classification and the derived operator family.

At each node the problem is regular when Range(B'P) is contained in
Range(R).  In the irregular case the null space of R is split off with an
orthogonal row transformation T0, and the quantities

    A0 = A - B R^+ B' P          D0 = -B R^+ B'
    [* C0'] = P B (I - R^+R) T0^-1
    [* B0 ] =   B (I - R^+R) T0^-1
    [* G0 ] =   T0^-1

are tabulated on the grid (A0 and D0 also at midpoints, for RK4 stages).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrixkit import DEFAULT_TOL, numerical_rank, pinv, rank_factorize_complement
from .problem import ProblemSpec, TimeGrid
from .riccati import RiccatiSolution, pinv_half_grid


class InconsistentRankError(ValueError):
    """rank(R) changes along the horizon; the derived operators are undefined."""


@dataclass(frozen=True)
class RegularityReport:
    regular: np.ndarray
    rank_R: np.ndarray
    residuals: np.ndarray

    @property
    def worst_residual(self) -> float:
        return float(self.residuals.max())

    @property
    def is_irregular(self) -> bool:
        return bool(np.any(~self.regular))

    @property
    def verdict(self) -> str:
        return "irregular" if self.is_irregular else "regular"

    def summary(self) -> str:
        n_irr = int(np.count_nonzero(~self.regular))
        total = self.regular.size
        if n_irr == 0:
            head = "REGULAR"
        elif n_irr == total:
            head = "IRREGULAR (all nodes)"
        else:
            head = f"IRREGULAR ({n_irr}/{total} nodes)"
        ranks = sorted(set(self.rank_R.tolist()))
        rank_txt = str(ranks[0]) if len(ranks) == 1 else f"varies {ranks}"
        return f"{head}; rank(R) = {rank_txt}; worst range residual = {self.worst_residual:.3e}"


def classify(spec: ProblemSpec, P: RiccatiSolution, tol: float = DEFAULT_TOL) -> RegularityReport:
    g = spec.grid
    B = spec.B.on_nodes(g)
    X = np.swapaxes(B, 1, 2) @ P.P
    if spec.R.is_constant:
        R0 = spec.R.samples[0]
        proj = (R0 @ pinv(R0, tol))[None]
        ranks = np.full(g.steps + 1, numerical_rank(R0, tol))
    else:
        R = spec.R.on_nodes(g)
        proj = np.stack([Rk @ pinv(Rk, tol) for Rk in R])
        ranks = np.array([numerical_rank(Rk, tol) for Rk in R])
    # Same test as matrixkit.range_included, batched over the nodes.
    res = np.linalg.norm(X - proj @ X, ord=2, axis=(1, 2))
    flags = res <= tol * (1.0 + np.linalg.norm(X, ord=2, axis=(1, 2)))
    return RegularityReport(flags, ranks, res)


@dataclass(frozen=True)
class DerivedOperators:
    grid: TimeGrid
    m0: int
    A0_half: np.ndarray
    D0_half: np.ndarray
    C0: np.ndarray
    B0: np.ndarray
    G0: np.ndarray
    T0: np.ndarray
    Upsilon: np.ndarray
    Rpinv: np.ndarray
    # Left ("*") column blocks of the defining products; kept for inspection only.
    C0_star: np.ndarray
    B0_star: np.ndarray

    @property
    def A0(self) -> np.ndarray:
        return self.A0_half[0::2]

    @property
    def D0(self) -> np.ndarray:
        return self.D0_half[0::2]

    @property
    def width(self) -> int:
        """m - m0, the dimension of the auxiliary control u1."""
        return self.C0.shape[1]


def derive_operators(spec: ProblemSpec, P: RiccatiSolution, tol: float = DEFAULT_TOL) -> DerivedOperators:
    g = spec.grid
    N = g.steps
    m = spec.m
    R_nodes = spec.R.on_nodes(g)
    if spec.R.is_constant:
        fac = [rank_factorize_complement(R_nodes[0], tol)] * (N + 1)
    else:
        fac = [rank_factorize_complement(Rk, tol) for Rk in R_nodes]
    m0s = np.array([f.m0 for f in fac])
    if np.any(m0s != m0s[0]):
        bad = np.flatnonzero(m0s != m0s[0]).tolist()
        raise InconsistentRankError(
            f"rank(R) is {m0s[0]} at node 0 but differs at nodes {bad[:20]}{'...' if len(bad) > 20 else ''}"
        )
    m0 = int(m0s[0])

    A = spec.A.on_half_nodes(g)
    B_half = spec.B.on_half_nodes(g)
    Rp_half = pinv_half_grid(spec, tol)
    Bt_half = np.swapaxes(B_half, 1, 2)
    S = B_half @ Rp_half @ Bt_half
    A0_half = A - S @ P.on_half_nodes()
    D0_half = -S

    B = B_half[0::2]
    Rp = Rp_half[0::2]
    T0 = np.stack([f.T0 for f in fac])
    T0_inv = np.swapaxes(T0, 1, 2)
    proj = np.eye(m) - Rp @ R_nodes
    BN_T = B @ proj @ T0_inv
    PBN_T = P.P @ BN_T
    return DerivedOperators(
        grid=g,
        m0=m0,
        A0_half=A0_half,
        D0_half=D0_half,
        C0=np.swapaxes(PBN_T[:, :, m0:], 1, 2).copy(),
        B0=BN_T[:, :, m0:].copy(),
        G0=T0_inv[:, :, m0:].copy(),
        T0=T0,
        Upsilon=np.stack([f.Upsilon for f in fac]),
        Rpinv=Rp,
        C0_star=np.swapaxes(PBN_T[:, :, :m0], 1, 2).copy(),
        B0_star=BN_T[:, :, :m0].copy(),
    )


def regular_feedback(ops: DerivedOperators, spec: ProblemSpec, P: np.ndarray) -> np.ndarray:
    """Per-node ``-R^+ B' P`` for a stack of symmetric matrices ``P``."""
    B = spec.B.on_nodes(spec.grid)
    return -ops.Rpinv @ np.swapaxes(B, 1, 2) @ P

