"""Controller synthesis for irregular (and regular) LQG problems with the
mean-terminal cost ``[E x(T)]' H [E x(T)]``.

The optimal control is a feedback on the Kalman estimate,

    u(t) = -R^+ B' (P + P1) xhat + G0 u1        for t < T,
    u(T) = -R^+ B' H E[x(T)]                    (deterministic),

where P1 solves the companion Riccati equation and must satisfy
``C0 + B0' P1 = 0`` along the horizon, and u1 steers ``P1(T) E[xhat(T)]``
to zero.  u1 is produced either open loop (Gramian construction) or as a
feedback ``u1 = K xhat``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import DerivedOperators, RegularityReport, classify, derive_operators, regular_feedback
from .kalman import FilterCovarianceSolution
from .matrixkit import DEFAULT_TOL, congruence_diag, pinv, range_included, range_residual
from .problem import ProblemSpec
from .riccati import (
    Gramian,
    P1Solution,
    RiccatiSolution,
    TransitionSolution,
    gramian_G1,
    quadrature_weights,
    solve_filter_covariance,
    solve_P,
    solve_P1,
    transition_P2,
)

D4_TOL = 1e-6
DF7_TOL = 1e-8
GUARD_STEPS = 10


class P1TerminalNotFound(RuntimeError):
    pass


class ClosedLoopInfeasible(RuntimeError):
    pass


def d4_holds(P1sol: P1Solution, ops: DerivedOperators, d4_tol: float = D4_TOL) -> bool:
    scale = 1.0 + (float(np.linalg.norm(ops.C0, ord=2, axis=(1, 2)).max()) if ops.width else 0.0)
    return P1sol.d4_residual <= d4_tol * scale


def resolve_p1_terminal(
    spec: ProblemSpec, ops: DerivedOperators, tol: float = DEFAULT_TOL, d4_tol: float = D4_TOL
) -> np.ndarray:
    """Pick the terminal value P1(T).

    A user-supplied ``spec.p1_terminal`` is returned as is.  Otherwise the
    minimum-norm symmetric X solving ``C0(T) + B0'(T) X = 0`` in the least
    squares sense is tried, and accepted only if the resulting P1 keeps the
    constraint residual below ``d4_tol`` on the whole grid.
    """
    return _p1_candidate(spec, ops, d4_tol)[0]


def _p1_candidate(spec: ProblemSpec, ops: DerivedOperators, d4_tol: float):
    # Returns (P1(T), its P1 solution if one was integrated on the way).
    if spec.p1_terminal is not None:
        return np.array(spec.p1_terminal, dtype=float), None
    n = spec.n
    C0T, B0T = ops.C0[-1], ops.B0[-1]
    if ops.width == 0:
        return np.zeros((n, n)), None
    iu = np.triu_indices(n)
    cols = []
    for i, j in zip(*iu):
        E = np.zeros((n, n))
        E[i, j] = E[j, i] = 1.0
        cols.append((B0T.T @ E).ravel())
    M = np.column_stack(cols)
    v, *_ = np.linalg.lstsq(M, -C0T.ravel(), rcond=None)
    X = np.zeros((n, n))
    X[iu] = v
    X = np.triu(X) + np.triu(X, 1).T
    cand = solve_P1(spec, ops, X)
    if not d4_holds(cand, ops, d4_tol):
        raise P1TerminalNotFound(
            f"P1 terminal value not found (least-squares candidate leaves C0 + B0'P1 residual "
            f"{cand.d4_residual:.3e}); supply p1_terminal"
        )
    return X, cand


@dataclass(frozen=True)
class SolvabilityVerdict:
    d4_holds: bool
    d4_residual: float
    terminal_reachable: bool
    range_residual: float

    @property
    def solvable(self) -> bool:
        return self.d4_holds and self.terminal_reachable

    def failed_condition(self) -> str | None:
        if not self.d4_holds:
            return f"constraint C0 + B0'P1 = 0 violated: max ||C0 + B0'P1|| = {self.d4_residual:.3e}"
        if not self.terminal_reachable:
            return f"terminal constraint unreachable: Range P1(t0) not in Range G1 (residual {self.range_residual:.3e})"
        return None


def check_solvability(
    spec: ProblemSpec,
    ops: DerivedOperators,
    P1sol: P1Solution,
    tol: float = DEFAULT_TOL,
    d4_tol: float = D4_TOL,
    closed=None,
    G1: Gramian | None = None,
) -> SolvabilityVerdict:
    """Constraint residual along the grid plus reachability of ``P1(T) E[xhat(T)] = 0``.

    Reachability is established by the Gramian range test, or by a solvable
    closed-loop solution when one is passed in.
    """
    if G1 is None:
        G1 = gramian_G1(ops, transition_P2(ops, spec.grid), spec.grid)
    res = range_residual(P1sol.P1[0], G1.G1, tol)
    reachable = range_included(P1sol.P1[0], G1.G1, tol)
    if closed is not None and closed.solvable:
        reachable = True
    return SolvabilityVerdict(d4_holds(P1sol, ops, d4_tol), P1sol.d4_residual, reachable, res)


def propagate_mean(spec: ProblemSpec, gain, offset, hold_from: int | None = None, terminal=None):
    """Euler path of ``x' = A x + B u`` with ``u_k = gain_k x_k + offset_k``.

    From node ``hold_from`` on the control value is frozen at the one computed
    there.  ``terminal`` (a callable of x(T)) gives the control at the last
    node.  Returns ``(x, u)`` with shapes ``(N+1, n)`` and ``(N+1, m)``.
    """
    g = spec.grid
    A = spec.A.on_nodes(g)
    B = spec.B.on_nodes(g)
    x = np.empty((g.steps + 1, spec.n))
    u = np.empty((g.steps + 1, spec.m))
    x[0] = spec.x0_mean
    held = None
    for k in range(g.steps):
        if hold_from is not None and k >= hold_from:
            if held is None:
                held = gain[k] @ x[k] + offset[k]
            u[k] = held
        else:
            u[k] = gain[k] @ x[k] + offset[k]
        x[k + 1] = x[k] + g.h * (A[k] @ x[k] + B[k] @ u[k])
    N = g.steps
    u[N] = terminal(x[N]) if terminal is not None else gain[N] @ x[N] + offset[N]
    return x, u


def _terminal_branch(spec: ProblemSpec, ops: DerivedOperators):
    # u(T) = -R^+ B' H E[x(T)]; callers add the free null-space component (zero by default).
    M = -ops.Rpinv[-1] @ spec.B.on_nodes(spec.grid)[-1].T @ spec.H
    return lambda xT: M @ xT


@dataclass(frozen=True)
class OpenLoopSolution:
    feasible: bool
    u1_schedule: np.ndarray
    u_schedule: np.ndarray
    xbar: np.ndarray
    feedback: np.ndarray
    range_residual: float
    optimal_cost_deterministic: float
    gramian: Gramian
    transition: TransitionSolution


def solve_open_loop(
    spec: ProblemSpec,
    P: RiccatiSolution,
    ops: DerivedOperators,
    P1sol: P1Solution,
    P2: TransitionSolution | None = None,
    G1: Gramian | None = None,
    tol: float = DEFAULT_TOL,
) -> OpenLoopSolution:
    """Open-loop u1 from the Gramian, ``u1 = C0 P2(t0,t)' G1^+ P1(t0) x0``."""
    g = spec.grid
    P2 = transition_P2(ops, g) if P2 is None else P2
    G1 = gramian_G1(ops, P2, g) if G1 is None else G1
    x0 = spec.x0_mean
    P1_0 = P1sol.P1[0]
    res = range_residual(P1_0, G1.G1, tol)
    feasible = range_included(P1_0, G1.G1, tol)
    target = pinv(G1.G1, tol) @ P1_0 @ x0
    u1 = ops.C0 @ np.swapaxes(P2.P2, 1, 2) @ target
    feedback = regular_feedback(ops, spec, P.P + P1sol.P1)
    offset = np.einsum("kij,kj->ki", ops.G0, u1)
    base = _terminal_branch(spec, ops)
    # u1 is deterministic here, so its terminal value is an admissible choice of the free term.
    xbar, u = propagate_mean(spec, feedback, offset, terminal=lambda xT: base(xT) + offset[-1])
    cost = float(x0 @ (P.P[0] + P1_0) @ x0)
    return OpenLoopSolution(feasible, u1, u, xbar, feedback, res, cost, G1, P2)


def _procrustes(V: np.ndarray, V_prev: np.ndarray) -> np.ndarray:
    # Rotate the basis V (within its span) to be as close as possible to V_prev.
    if V.shape[1] == 0:
        return V
    U, _, Wt = np.linalg.svd(V.T @ V_prev)
    return V @ (U @ Wt)


@dataclass(frozen=True)
class ClosedLoopSolution:
    K_schedule: np.ndarray
    feedback: np.ndarray
    df7_residuals: np.ndarray
    df7_residual: float
    epsilon_guard: float
    guard_index: int
    solvable: bool
    ranks: np.ndarray
    xbar: np.ndarray
    u_schedule: np.ndarray


def solve_closed_loop(
    spec: ProblemSpec,
    P: RiccatiSolution,
    ops: DerivedOperators,
    P1sol: P1Solution,
    tol: float = DEFAULT_TOL,
    df7_tol: float = DF7_TOL,
    guard_steps: int = GUARD_STEPS,
    strict: bool = True,
) -> ClosedLoopSolution:
    """Feedback ``u1 = K xhat`` making the P1-range coordinates decay like ``(T - t)``.

    With ``x = T1 y`` and ``T1' P1 T1 = blockdiag(Phat, 0)``, the first ``r``
    rows of the mean dynamics of y must read ``y1' = y1 / (t - T)``:

        Ttil1 + Ahat1 + B1 K T1 = [I/(t - T), 0]

    where Ttil1, Ahat1, B1 are the leading r rows of ``T1_dot' T1``,
    ``T1' (A0 + D0 P1) T1`` and ``T1' B0``.  K is taken as the least-squares
    solution ``B1^+ (rhs - Ttil1 - Ahat1) T1'`` and accepted by residual.
    Nodes closer than ``guard_steps * h`` to T are not evaluated.
    """
    g = spec.grid
    N, n, w = g.steps, spec.n, ops.width
    if guard_steps < 1 or guard_steps >= N:
        raise ValueError(f"guard_steps must be in [1, {N - 1}]")
    kg = N - guard_steps
    t = g.nodes
    P1 = P1sol.P1

    decs = [congruence_diag(P1[k], tol) for k in range(kg + 1)]
    ranks = np.array([d.r for d in decs])
    T1 = np.stack([d.T1cal for d in decs])
    for k in range(1, kg + 1):
        r = ranks[k]
        if r == ranks[k - 1]:
            T1[k] = np.hstack([_procrustes(T1[k][:, :r], T1[k - 1][:, :r]),
                               _procrustes(T1[k][:, r:], T1[k - 1][:, r:])])
    T1dot = np.gradient(T1, g.h, axis=0, edge_order=2) if kg >= 2 else np.zeros_like(T1)

    K = np.zeros((N + 1, w, n))
    res = np.zeros(kg + 1)
    closed_A = ops.A0[: kg + 1] + ops.D0[: kg + 1] @ P1[: kg + 1]
    gaps, targets = {}, {}
    for k in range(kg + 1):
        r = ranks[k]
        if r == 0:
            continue
        Tk = T1[k]
        rhs = np.zeros((r, n))
        rhs[:, :r] = np.eye(r) / (t[k] - g.T)
        M = rhs - (T1dot[k].T @ Tk)[:r] - (Tk.T @ closed_A[k] @ Tk)[:r]
        B1 = (Tk.T @ ops.B0[k])[:r]
        K[k] = pinv(B1, tol) @ M @ Tk.T
        gaps.setdefault(r, []).append(B1 @ K[k] @ Tk - M)
        targets.setdefault(r, []).append(M)
    for r in gaps:
        # Spectral norms batched per rank (the blocks have r rows).
        idx = np.flatnonzero(ranks == r)
        num = np.linalg.norm(np.stack(gaps[r]), ord=2, axis=(1, 2))
        res[idx] = num / (1.0 + np.linalg.norm(np.stack(targets[r]), ord=2, axis=(1, 2)))
    K[kg + 1:] = K[kg]
    worst = float(res.max())
    solvable = worst <= df7_tol
    if strict and not solvable:
        raise ClosedLoopInfeasible(
            f"closed-loop gain condition not satisfiable with least-squares K (relative residual {worst:.3e})"
        )
    feedback = regular_feedback(ops, spec, P.P + P1) + ops.G0 @ K
    xbar, u = propagate_mean(spec, feedback, np.zeros((N + 1, spec.m)), hold_from=kg,
                             terminal=_terminal_branch(spec, ops))
    return ClosedLoopSolution(K, feedback, res, worst, guard_steps * g.h, kg, solvable, ranks, xbar, u)


@dataclass(frozen=True)
class RegularSolution:
    F_schedule: np.ndarray
    xbar: np.ndarray
    u_schedule: np.ndarray


def solve_regular(spec: ProblemSpec, P: RiccatiSolution, tol: float = DEFAULT_TOL) -> RegularSolution:
    """Classic feedback ``u = -R^+ B' P xhat``."""
    g = spec.grid
    R = spec.R.on_nodes(g)
    Rp = np.stack([pinv(Rk, tol) for Rk in R]) if not spec.R.is_constant else np.repeat(
        pinv(R[0], tol)[None], g.steps + 1, axis=0)
    F = -Rp @ np.swapaxes(spec.B.on_nodes(g), 1, 2) @ P.P
    xbar, u = propagate_mean(spec, F, np.zeros((g.steps + 1, spec.m)))
    return RegularSolution(F, xbar, u)


def optimal_lqg_cost(
    spec: ProblemSpec,
    P: RiccatiSolution,
    P1sol: P1Solution | None,
    Phat: FilterCovarianceSolution,
) -> float:
    """``xhat0' (P + P1)(t0) xhat0 + integral of trace(Q Phat)``.

    The second term is the control-independent estimation-error cost.
    """
    g = spec.grid
    x0 = spec.x0_mean
    Pi0 = P.P[0] + (P1sol.P1[0] if P1sol is not None else 0.0)
    Q = spec.Q.on_nodes(g)
    tr = np.einsum("kij,kji->k", Q, Phat.Phat)
    return float(x0 @ Pi0 @ x0 + quadrature_weights(g.steps, g.h) @ tr)


@dataclass(frozen=True)
class Trajectory:
    """A filtered path: estimates, controls and innovation increments.

    ``dnu`` is ``None`` for the deterministic mean path (zero innovation).
    """

    xhat: np.ndarray
    u: np.ndarray
    x_terminal_mean: np.ndarray
    dnu: np.ndarray | None = None


@dataclass(frozen=True)
class CostateCheck:
    stationarity: np.ndarray
    state: np.ndarray
    costate: np.ndarray
    terminal: float

    @staticmethod
    def _rms(a):
        return float(np.sqrt(np.mean(a**2))) if a.size else 0.0

    @property
    def max(self) -> dict:
        return {"stationarity": float(self.stationarity.max(initial=0.0)),
                "state": float(self.state.max(initial=0.0)),
                "costate": float(self.costate.max(initial=0.0)),
                "terminal": self.terminal}

    @property
    def rms(self) -> dict:
        return {"stationarity": self._rms(self.stationarity), "state": self._rms(self.state),
                "costate": self._rms(self.costate), "terminal": self.terminal}


def fbde_residuals(
    spec: ProblemSpec,
    P: RiccatiSolution,
    P1sol: P1Solution | None,
    traj: Trajectory,
    Phat: FilterCovarianceSolution | None = None,
) -> CostateCheck:
    """Residuals of the filter/costate/stationarity relations with
    ``p = (P + P1) xhat`` and ``q = (P + P1) L``.

    State and costate residuals are per unit time (divided by h).
    """
    g = spec.grid
    h, N = g.h, g.steps
    A, B, Q, R = (sch.on_nodes(g) for sch in (spec.A, spec.B, spec.Q, spec.R))
    Pi = P.P + (P1sol.P1 if P1sol is not None else 0.0)
    xh, u = traj.xhat, traj.u
    p = np.einsum("kij,kj->ki", Pi, xh)
    L = Phat.L if Phat is not None else np.zeros((N + 1, spec.n, spec.s))
    dnu = traj.dnu if traj.dnu is not None else np.zeros((N, spec.s))
    q_dnu = np.einsum("kij,kj->ki", Pi[:-1] @ L[:-1], dnu)
    L_dnu = np.einsum("kij,kj->ki", L[:-1], dnu)

    stat = np.linalg.norm(np.einsum("kij,kj->ki", R[:-1], u[:-1])
                          + np.einsum("kji,kj->ki", B[:-1], p[:-1]), axis=1)
    drift = np.einsum("kij,kj->ki", A[:-1], xh[:-1]) + np.einsum("kij,kj->ki", B[:-1], u[:-1])
    state = np.linalg.norm(xh[1:] - xh[:-1] - h * drift - L_dnu, axis=1) / h
    pdrift = -(np.einsum("kji,kj->ki", A[:-1], p[:-1]) + np.einsum("kij,kj->ki", Q[:-1], xh[:-1]))
    costate = np.linalg.norm(p[1:] - p[:-1] - h * pdrift - q_dnu, axis=1) / h
    terminal = float(np.linalg.norm(p[-1] - spec.H @ traj.x_terminal_mean))
    return CostateCheck(stat, state, costate, terminal)


@dataclass(frozen=True)
class Synthesis:
    """Everything computed for one problem by :func:`synthesize`."""

    spec: ProblemSpec
    P: RiccatiSolution
    regularity: RegularityReport
    ops: DerivedOperators | None
    filter: FilterCovarianceSolution
    mode: str
    P1: P1Solution | None = None
    verdict: SolvabilityVerdict | None = None
    open_loop: OpenLoopSolution | None = None
    closed_loop: ClosedLoopSolution | None = None
    regular: RegularSolution | None = None
    failure: str | None = None

    @property
    def solvable(self) -> bool:
        return self.failure is None

    @property
    def optimal_cost(self) -> float | None:
        if not self.solvable:
            return None
        return optimal_lqg_cost(self.spec, self.P, self.P1, self.filter)


def synthesize(
    spec: ProblemSpec,
    mode: str = "auto",
    tol: float = DEFAULT_TOL,
    p1_terminal=None,
    d4_tol: float = D4_TOL,
    df7_tol: float = DF7_TOL,
    guard_steps: int = GUARD_STEPS,
) -> Synthesis:
    """Run the full pipeline and record (rather than raise) unsolvability.

    ``mode`` is ``"open"``, ``"closed"`` or ``"auto"`` (open loop when the
    Gramian test passes, closed loop otherwise).  Regular problems always
    take the classic branch.
    """
    if mode not in ("open", "closed", "auto"):
        raise ValueError(f"unknown mode {mode!r}")
    if p1_terminal is not None:
        spec = spec.replace(p1_terminal=np.asarray(p1_terminal, dtype=float).reshape(spec.n, spec.n))
    P = solve_P(spec, tol)
    regularity = classify(spec, P, tol)
    filt = solve_filter_covariance(spec)
    if not regularity.is_irregular:
        return Synthesis(spec, P, regularity, None, filt, "regular", regular=solve_regular(spec, P, tol))

    ops = derive_operators(spec, P, tol)
    base = dict(spec=spec, P=P, regularity=regularity, ops=ops, filter=filt)
    try:
        P1T, P1sol = _p1_candidate(spec, ops, d4_tol)
    except P1TerminalNotFound as exc:
        return Synthesis(**base, mode=mode, failure=str(exc))
    P1sol = solve_P1(spec, ops, P1T) if P1sol is None else P1sol
    P2 = transition_P2(ops, spec.grid)
    G1 = gramian_G1(ops, P2, spec.grid)
    verdict = check_solvability(spec, ops, P1sol, tol, d4_tol, G1=G1)
    base.update(P1=P1sol, verdict=verdict)
    if not verdict.d4_holds:
        return Synthesis(**base, mode=mode, failure=verdict.failed_condition())

    open_sol = closed_sol = None
    if mode in ("open", "auto"):
        open_sol = solve_open_loop(spec, P, ops, P1sol, P2, G1, tol=tol)
        if open_sol.feasible:
            return Synthesis(**base, mode="open", open_loop=open_sol)
        if mode == "open":
            return Synthesis(**base, mode="open", open_loop=open_sol, failure=verdict.failed_condition())
    closed_sol = solve_closed_loop(spec, P, ops, P1sol, tol, df7_tol, guard_steps, strict=False)
    verdict = check_solvability(spec, ops, P1sol, tol, d4_tol, closed=closed_sol, G1=G1)
    base["verdict"] = verdict
    failure = None if closed_sol.solvable else (
        f"closed-loop gain condition not satisfiable with least-squares K "
        f"(relative residual {closed_sol.df7_residual:.3e})")
    return Synthesis(**base, mode="closed", open_loop=open_sol, closed_loop=closed_sol, failure=failure)
