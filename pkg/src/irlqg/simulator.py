"""Monte Carlo simulation of plant, output, Kalman filter and controller.

Every controller used here is affine in the filter estimate,
``u_k = gain_k xhat_k + offset_k``, optionally frozen from a guard node on
and with a deterministic control at the terminal node.

Trial ``i`` draws all of its randomness from its own stream seeded by
``(seed, i)``; trials are simulated in fixed-size batches and reduced in
batch order, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kalman import FilterCovarianceSolution
from .problem import ProblemSpec, intro_problem
from .riccati import solve_filter_covariance

BATCH_SIZE = 512


class SimulationError(ArithmeticError):
    """Non-finite values appeared in a simulated path."""


@dataclass(frozen=True)
class Controller:
    name: str
    gain: np.ndarray
    offset: np.ndarray
    hold_from: int | None = None
    terminal_u: np.ndarray | None = None


def schedule_controller(spec: ProblemSpec, u, name: str = "custom") -> Controller:
    """Pure open-loop controller applying ``u[k]`` at node k."""
    N = spec.grid.steps
    u = np.asarray(u, dtype=float).reshape(N + 1, spec.m)
    return Controller(name, np.zeros((N + 1, spec.m, spec.n)), u.copy())


def zero_controller(spec: ProblemSpec) -> Controller:
    return schedule_controller(spec, np.zeros((spec.grid.steps + 1, spec.m)), "zero")


def controller_from_synthesis(syn) -> Controller:
    """Controller for a :class:`~irlqg.solver.Synthesis` in its chosen mode."""
    spec = syn.spec
    N = spec.grid.steps
    zeros = np.zeros((N + 1, spec.m))
    if syn.mode == "regular":
        return Controller("regular", syn.regular.F_schedule, zeros)
    if syn.mode == "open":
        ol = syn.open_loop
        offset = ol.u_schedule - np.einsum("kij,kj->ki", ol.feedback, ol.xbar)
        return Controller("open_loop", ol.feedback, offset, terminal_u=ol.u_schedule[-1])
    cl = syn.closed_loop
    return Controller("closed_loop", cl.feedback, zeros, hold_from=cl.guard_index, terminal_u=cl.u_schedule[-1])


@dataclass(frozen=True)
class SimConfig:
    trials: int
    seed: int
    controller: Controller
    record_paths: bool = False
    batch_size: int = BATCH_SIZE
    threads: int | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class SimResult:
    trials: int
    seed: int
    t: np.ndarray
    mean_x: np.ndarray
    mean_xhat: np.ndarray
    mean_u: np.ndarray
    mean_terminal_state: np.ndarray
    terminal_state_se: np.ndarray
    mean_terminal_estimate: np.ndarray
    modified_cost: float
    modified_se: float
    classic_terminal_cost: float
    classic_terminal_se: float
    running_cost: float
    running_se: float
    classic_cost: float
    classic_se: float
    terminal_constraint_residual: float
    constraint_se: float
    err_cov: np.ndarray
    err_mean: np.ndarray
    err_mean_se: np.ndarray
    orth_mean: np.ndarray
    orth_se: np.ndarray
    paths: dict | None = field(default=None, repr=False)


def _trial_noise(seed: int, i: int, n: int, s: int, N: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
    z0 = rng.standard_normal(n)
    W = rng.standard_normal((N, n))
    V = rng.standard_normal((N, s))
    return z0, W, V


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(lam, 0.0, None))


class _Coefficients:
    def __init__(self, spec: ProblemSpec, filt: FilterCovarianceSolution):
        g = spec.grid
        self.A, self.B, self.C, self.D, self.G, self.Q, self.R = (
            getattr(spec, k).on_nodes(g) for k in "ABCDGQR")
        self.L = filt.L
        self.x0_mean = spec.x0_mean
        self.sqrt_sigma0 = _psd_sqrt(spec.sigma0)
        self.h = g.h
        self.N = g.steps
        self.n, self.m, self.s = spec.n, spec.m, spec.s


def _simulate_batch(co: _Coefficients, ctrl: Controller, seed: int, ids: range, record: bool) -> dict:
    N, n, m, s, h = co.N, co.n, co.m, co.s, co.h
    b = len(ids)
    noise = [_trial_noise(seed, i, n, s, N) for i in ids]
    Z0 = np.stack([z[0] for z in noise])
    W = np.stack([z[1] for z in noise]) * np.sqrt(h)
    V = np.stack([z[2] for z in noise]) * np.sqrt(h)

    X = co.x0_mean + Z0 @ co.sqrt_sigma0.T
    Xh = np.repeat(co.x0_mean[None], b, axis=0)

    acc = {
        "x": np.zeros((N + 1, n)), "xh": np.zeros((N + 1, n)), "u": np.zeros((N + 1, m)),
        "err": np.zeros((N + 1, n)), "errerr": np.zeros((N + 1, n, n)),
        "orth": np.zeros(N + 1), "orth2": np.zeros(N + 1),
    }
    running = np.zeros(b)
    if record:
        px, pxh, pu = np.empty((b, N + 1, n)), np.empty((b, N + 1, n)), np.empty((b, N + 1, m))
    held = None

    def accumulate(k, X, Xh, U):
        E = X - Xh
        acc["x"][k] = X.sum(0)
        acc["xh"][k] = Xh.sum(0)
        acc["u"][k] = U.sum(0)
        acc["err"][k] = E.sum(0)
        acc["errerr"][k] = E.T @ E
        o = np.einsum("bi,bi->b", Xh, E)
        acc["orth"][k] = o.sum()
        acc["orth2"][k] = o @ o
        if record:
            px[:, k], pxh[:, k], pu[:, k] = X, Xh, U
        return (np.einsum("bi,ij,bj->b", X, co.Q[k], X) + np.einsum("bi,ij,bj->b", U, co.R[k], U))

    for k in range(N):
        if ctrl.hold_from is not None and k >= ctrl.hold_from:
            if held is None:
                held = Xh @ ctrl.gain[k].T + ctrl.offset[k]
            U = held
        else:
            U = Xh @ ctrl.gain[k].T + ctrl.offset[k]
        c = accumulate(k, X, Xh, U)
        running += (0.5 * h if k == 0 else h) * c
        dy = h * X @ co.C[k].T + V[:, k] @ co.G[k].T
        dnu = dy - h * Xh @ co.C[k].T
        X = X + h * (X @ co.A[k].T + U @ co.B[k].T) + W[:, k] @ co.D[k].T
        Xh = Xh + h * (Xh @ co.A[k].T + U @ co.B[k].T) + dnu @ co.L[k].T
    if ctrl.terminal_u is not None:
        U = np.repeat(np.asarray(ctrl.terminal_u, dtype=float)[None], b, axis=0)
    else:
        U = Xh @ ctrl.gain[N].T + ctrl.offset[N]
    running += 0.5 * h * accumulate(N, X, Xh, U)

    out = {"acc": acc, "xT": X, "xhT": Xh, "running": running}
    if record:
        out["paths"] = {"x": px, "xhat": pxh, "u": pu}
    if not (all(np.all(np.isfinite(a)) for a in acc.values()) and np.all(np.isfinite(running))):
        bad = [i for i, r in zip(ids, running) if not np.isfinite(r)]
        raise SimulationError(f"non-finite values in simulated paths (trials {bad[:10]} of batch {ids.start}..)")
    return out


def _worker_count(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    cap = os.environ.get("IRLQG_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def _se(std: np.ndarray | float, trials: int):
    if trials < 2:
        return np.full_like(np.asarray(std, dtype=float), np.inf)
    return np.asarray(std) / np.sqrt(trials)


def run_monte_carlo(
    spec: ProblemSpec,
    cfg: SimConfig,
    filt: FilterCovarianceSolution | None = None,
    P1_terminal=None,
) -> SimResult:
    """Simulate ``cfg.trials`` closed-loop runs and estimate both costs.

    The modified cost is estimated as ``mean(x_T)' H mean(x_T)`` plus the mean
    running cost; that plug-in estimate is biased low by
    ``trace(H Cov(x_T)) / trials``.  The classic terminal cost is the sample
    mean of ``x_T' H x_T``.
    """
    filt = solve_filter_covariance(spec) if filt is None else filt
    co = _Coefficients(spec, filt)
    n = co.n
    bs = max(1, int(cfg.batch_size))
    batches = [range(i, min(i + bs, cfg.trials)) for i in range(0, cfg.trials, bs)]
    def work(ids):
        # Overflow is reported by the finiteness check, not as numpy warnings.
        with np.errstate(over="ignore", invalid="ignore"):
            return _simulate_batch(co, cfg.controller, cfg.seed, ids, cfg.record_paths)

    workers = min(_worker_count(cfg.threads), len(batches))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(work, batches))
    else:
        parts = [work(ids) for ids in batches]

    M = cfg.trials
    acc = {k: sum(p["acc"][k] for p in parts) for k in parts[0]["acc"]}
    xT = np.concatenate([p["xT"] for p in parts])
    xhT = np.concatenate([p["xhT"] for p in parts])
    run = np.concatenate([p["running"] for p in parts])
    H = spec.H
    ddof = 1 if M > 1 else 0

    mT = xT.mean(0)
    mhT = xhT.mean(0)
    psi = 2.0 * (xT - mT) @ (H @ mT) + (run - run.mean())
    modified = float(mT @ H @ mT + run.mean())
    term = np.einsum("bi,ij,bj->b", xT, H, xT)
    classic_all = term + run

    P1T = np.zeros((n, n)) if P1_terminal is None else np.asarray(P1_terminal, dtype=float)
    cov_hT = np.atleast_2d(np.cov(xhT, rowvar=False, ddof=ddof)) if M > 1 else np.zeros((n, n))
    constraint_se = float(np.sqrt(max(np.trace(P1T @ cov_hT @ P1T.T), 0.0) / M)) if M > 1 else np.inf

    err_mean = acc["err"] / M
    err_cov = (acc["errerr"] - M * np.einsum("ki,kj->kij", err_mean, err_mean)) / max(M - ddof, 1)
    err_var = np.clip(np.einsum("kii->ki", err_cov), 0.0, None)
    orth_mean = acc["orth"] / M
    orth_var = np.clip((acc["orth2"] - M * orth_mean**2) / max(M - ddof, 1), 0.0, None)

    paths = None
    if cfg.record_paths:
        paths = {k: np.concatenate([p["paths"][k] for p in parts]) for k in ("x", "xhat", "u")}

    return SimResult(
        trials=M,
        seed=cfg.seed,
        t=spec.grid.nodes,
        mean_x=acc["x"] / M,
        mean_xhat=acc["xh"] / M,
        mean_u=acc["u"] / M,
        mean_terminal_state=mT,
        terminal_state_se=_se(xT.std(0, ddof=ddof), M),
        mean_terminal_estimate=mhT,
        modified_cost=modified,
        modified_se=float(_se(psi.std(ddof=ddof), M)),
        classic_terminal_cost=float(term.mean()),
        classic_terminal_se=float(_se(term.std(ddof=ddof), M)),
        running_cost=float(run.mean()),
        running_se=float(_se(run.std(ddof=ddof), M)),
        classic_cost=float(classic_all.mean()),
        classic_se=float(_se(classic_all.std(ddof=ddof), M)),
        terminal_constraint_residual=float(np.linalg.norm(P1T @ mhT)),
        constraint_se=constraint_se,
        err_cov=err_cov,
        err_mean=err_mean,
        err_mean_se=_se(np.sqrt(err_var), M),
        orth_mean=orth_mean,
        orth_se=_se(np.sqrt(orth_var), M),
        paths=paths,
    )


@dataclass(frozen=True)
class DemoReport:
    T: float
    trials: int
    classic: float
    classic_se: float
    modified: float
    modified_se: float

    def table(self) -> str:
        rows = [
            ("cost", "classic E[x(T)^2]", "modified [E x(T)]^2"),
            ("estimate", f"{self.classic:.6f}", f"{self.modified:.6f}"),
            ("std. error", f"{self.classic_se:.6f}", f"{self.modified_se:.6f}"),
            ("reference", f"{self.T:.6f} (lower bound T)", "0 (optimal)"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def demo_intro(T: float = 1.0, trials: int = 10_000, seed: int = 0, steps: int = 1000, x0: float = 1.0) -> DemoReport:
    """Apply ``u = -x0/T`` to ``dx = u dt + dw`` and report both costs.

    The classic terminal cost cannot fall below T whatever the open-loop
    control; the mean-terminal cost is driven to zero.
    """
    spec = intro_problem(T=T, x0=x0, steps=steps)
    u = np.full((steps + 1, 1), -x0 / T)
    res = run_monte_carlo(spec, SimConfig(trials, seed, schedule_controller(spec, u, "open_loop")))
    return DemoReport(T, trials, res.classic_terminal_cost, res.classic_terminal_se,
                      res.modified_cost, res.modified_se)
