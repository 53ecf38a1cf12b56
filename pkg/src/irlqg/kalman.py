"""Continuous-time Kalman filter pieces used by the simulator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import TimeGrid


@dataclass(frozen=True)
class FilterCovarianceSolution:
    """Error covariance ``Phat[k]`` and filter gain ``L[k]`` at every grid node."""

    grid: TimeGrid
    Phat: np.ndarray
    L: np.ndarray


@dataclass(frozen=True)
class FilterState:
    t: float
    xhat: np.ndarray
    node_index: int


def innovation(dy: np.ndarray, C: np.ndarray, xhat: np.ndarray, h: float) -> np.ndarray:
    """Innovation increment ``dy - C xhat h``."""
    return dy - h * (C @ xhat)


def step_filter(state: FilterState, u, dy, L_k, spec, h: float | None = None) -> FilterState:
    """One Euler-Maruyama step of ``dxhat = (A xhat + B u) dt + L dnu``.

    Coefficients are taken from ``spec`` at ``state.t``; ``dy`` is the
    measured output increment over the step.
    """
    g = spec.grid
    h = g.h if h is None else h
    A, B, C = (sch(state.t, g) for sch in (spec.A, spec.B, spec.C))
    xhat = state.xhat
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dy = np.atleast_1d(np.asarray(dy, dtype=float))
    nxt = xhat + h * (A @ xhat + B @ u) + np.asarray(L_k) @ innovation(dy, C, xhat, h)
    return FilterState(state.t + h, nxt, state.node_index + 1)


@dataclass(frozen=True)
class ErrorCovarianceReport:
    max_rel_deviation: float
    terminal_rel_deviation: float
    terminal_sample_cov: np.ndarray
    terminal_Phat: np.ndarray
    orthogonality_mean: float
    orthogonality_se: float
    max_bias_z: float

    @property
    def orthogonal(self) -> bool:
        """Sample mean of xhat' xtilde at T within 3 standard errors of zero."""
        return abs(self.orthogonality_mean) <= 3.0 * self.orthogonality_se + 1e-15


def error_covariance_check(sim, Phat: FilterCovarianceSolution, floor: float = 1e-3) -> ErrorCovarianceReport:
    """Compare the ensemble covariance of ``x - xhat`` with ``Phat`` node by node.

    Relative deviations use ``||S_k - Phat_k|| / max(||Phat_k||, floor)``
    so that nodes with near-zero covariance do not dominate.
    """
    S = sim.err_cov
    P = Phat.Phat
    dev = np.linalg.norm(S - P, ord=2, axis=(1, 2))
    scale = np.maximum(np.linalg.norm(P, ord=2, axis=(1, 2)), floor)
    rel = dev / scale
    se = sim.err_mean_se
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(sim.err_mean) / se, np.where(sim.err_mean == 0, 0.0, np.inf))
    return ErrorCovarianceReport(
        max_rel_deviation=float(rel.max()),
        terminal_rel_deviation=float(rel[-1]),
        terminal_sample_cov=S[-1].copy(),
        terminal_Phat=P[-1].copy(),
        orthogonality_mean=float(sim.orth_mean[-1]),
        orthogonality_se=float(sim.orth_se[-1]),
        max_bias_z=float(z.max()),
    )
