import numpy as np
import pytest

from irlqg.kalman import FilterState, error_covariance_check, innovation, step_filter
from irlqg.problem import intro_problem
from irlqg.riccati import solve_filter_covariance
from irlqg.simulator import SimConfig, controller_from_synthesis, run_monte_carlo, zero_controller
from irlqg.solver import synthesize
from randprob import scalar_problem


def test_step_without_gain_is_mean_propagation():
    spec = scalar_problem(a=0.5, b=2.0, steps=100)
    st = FilterState(0.0, np.array([1.0]), 0)
    nxt = step_filter(st, [0.3], [123.0], np.zeros((1, 1)), spec)
    h = spec.grid.h
    assert nxt.xhat[0] == pytest.approx(1.0 + h * (0.5 + 0.6))
    assert nxt.node_index == 1 and nxt.t == pytest.approx(h)


def test_zero_innovation_matches_no_gain():
    spec = scalar_problem(a=-0.2, c=3.0, steps=100)
    st = FilterState(0.0, np.array([0.7]), 0)
    dy = 3.0 * 0.7 * spec.grid.h
    a = step_filter(st, [0.1], [dy], np.array([[5.0]]), spec)
    b = step_filter(st, [0.1], [0.0], np.zeros((1, 1)), spec)
    assert a.xhat[0] == pytest.approx(b.xhat[0], abs=1e-15)
    assert innovation(np.array([dy]), np.array([[3.0]]), st.xhat, spec.grid.h)[0] == pytest.approx(0.0, abs=1e-16)


def test_step_hand_arithmetic():
    spec = scalar_problem(steps=100)
    st = FilterState(0.0, np.array([0.0]), 0)
    nxt = step_filter(st, [0.0], [0.1], np.array([[1.0]]), spec, h=0.01)
    assert nxt.xhat[0] == pytest.approx(0.1, abs=1e-15)


def test_noise_free_error_is_zero():
    spec = scalar_problem(d=0.0, steps=100, x0_mean=[1.0])
    filt = solve_filter_covariance(spec)
    sim = run_monte_carlo(spec, SimConfig(50, 0, zero_controller(spec)), filt)
    rep = error_covariance_check(sim, filt)
    assert rep.max_rel_deviation == 0.0
    assert np.all(sim.err_cov == 0.0)


@pytest.fixture(scope="module")
def intro_closed_loop_sim():
    syn = synthesize(intro_problem(), mode="closed")
    sim = run_monte_carlo(syn.spec, SimConfig(10_000, 2024, controller_from_synthesis(syn)), syn.filter)
    return syn, sim


def test_intro_error_variance_matches_riccati(intro_closed_loop_sim):
    syn, sim = intro_closed_loop_sim
    rep = error_covariance_check(sim, syn.filter)
    assert rep.terminal_Phat[0, 0] == pytest.approx(np.tanh(1.0), abs=1e-9)
    assert rep.terminal_rel_deviation < 0.05


def test_estimate_orthogonal_to_error(intro_closed_loop_sim):
    syn, sim = intro_closed_loop_sim
    rep = error_covariance_check(sim, syn.filter)
    assert rep.orthogonal
    z = np.abs(sim.orth_mean[1:]) / sim.orth_se[1:]
    assert z.max() < 4.5  # max over 1000 correlated nodes


def test_filter_unbiased(intro_closed_loop_sim):
    syn, sim = intro_closed_loop_sim
    se = sim.err_mean_se[1:, 0]
    assert np.all(np.abs(sim.err_mean[1:, 0]) <= 3.0 * se)


def test_innovations_white():
    spec = intro_problem(steps=1000, sigma0=1.0)
    filt = solve_filter_covariance(spec)
    sim = run_monte_carlo(spec, SimConfig(500, 9, zero_controller(spec), record_paths=True), filt)
    xh = sim.paths["xhat"][:, :, 0]
    h = spec.grid.h
    # With u = 0 and A = 0 the filter step is xhat += L dnu, so dnu is recovered exactly.
    L = filt.L[:-1, 0, 0]
    dnu = np.diff(xh, axis=1) / L / np.sqrt(h)
    dnu = dnu - dnu.mean()
    var = np.mean(dnu**2)
    for lag in range(1, 6):
        prod = dnu[:, lag:] * dnu[:, :-lag]
        rho = prod.mean() / var
        se = 1.0 / np.sqrt(prod.size)
        assert abs(rho) <= 3.0 * se, (lag, rho, se)
