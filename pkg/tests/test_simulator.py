import dataclasses

import numpy as np
import pytest

from irlqg.problem import intro_problem
from irlqg.simulator import (
    Controller,
    SimConfig,
    SimulationError,
    controller_from_synthesis,
    demo_intro,
    run_monte_carlo,
    schedule_controller,
    zero_controller,
)
from irlqg.solver import synthesize
from randprob import random_problem


def same_result(a, b):
    for f in dataclasses.fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, dict):
            assert x.keys() == y.keys()
            for k in x:
                assert np.array_equal(x[k], y[k])
        else:
            assert np.array_equal(x, y), f.name


def intro_open(T=1.0, x0=1.0, steps=200, **kw):
    spec = intro_problem(T=T, x0=x0, steps=steps, **kw)
    return spec, schedule_controller(spec, np.full((steps + 1, 1), -x0 / T))


def test_reproducible():
    spec, ctrl = intro_open()
    a = run_monte_carlo(spec, SimConfig(700, 42, ctrl, record_paths=True))
    b = run_monte_carlo(spec, SimConfig(700, 42, ctrl, record_paths=True))
    same_result(a, b)
    c = run_monte_carlo(spec, SimConfig(700, 43, ctrl))
    assert c.modified_cost != a.modified_cost


def test_thread_count_does_not_matter():
    syn = synthesize(intro_problem(steps=200), mode="closed")
    ctrl = controller_from_synthesis(syn)
    a = run_monte_carlo(syn.spec, SimConfig(1500, 5, ctrl, threads=1))
    b = run_monte_carlo(syn.spec, SimConfig(1500, 5, ctrl, threads=4))
    same_result(a, b)


def test_trial_streams_independent_of_batching():
    spec, ctrl = intro_open()
    a = run_monte_carlo(spec, SimConfig(300, 1, ctrl, record_paths=True, batch_size=64))
    b = run_monte_carlo(spec, SimConfig(300, 1, ctrl, record_paths=True, batch_size=512))
    for k in ("x", "xhat", "u"):
        assert np.array_equal(a.paths[k], b.paths[k])


def test_prefix_of_trials_reuses_streams():
    spec, ctrl = intro_open()
    a = run_monte_carlo(spec, SimConfig(10, 3, ctrl, record_paths=True))
    b = run_monte_carlo(spec, SimConfig(25, 3, ctrl, record_paths=True))
    assert np.array_equal(a.paths["x"], b.paths["x"][:10])


def test_thread_cap_from_environment(monkeypatch):
    spec, ctrl = intro_open()
    monkeypatch.setenv("IRLQG_THREADS", "1")
    a = run_monte_carlo(spec, SimConfig(1200, 8, ctrl))
    monkeypatch.setenv("IRLQG_THREADS", "3")
    b = run_monte_carlo(spec, SimConfig(1200, 8, ctrl))
    same_result(a, b)


def test_trials_must_be_positive():
    spec, ctrl = intro_open()
    with pytest.raises(ValueError):
        SimConfig(0, 1, ctrl)


def test_single_trial_has_undefined_errors():
    spec, ctrl = intro_open()
    res = run_monte_carlo(spec, SimConfig(1, 7, ctrl))
    assert np.isinf(res.modified_se) and np.isinf(res.classic_terminal_se)
    assert np.all(np.isfinite(res.mean_terminal_state))


def test_modified_cost_below_classic():
    rng = np.random.default_rng(17)
    for n in (1, 3):
        spec = random_problem(rng, n, steps=100)
        res = run_monte_carlo(spec, SimConfig(400, 2, zero_controller(spec)))
        assert res.modified_cost <= res.classic_cost + 1e-12
        assert res.modified_se >= 0 and res.classic_se >= 0


def test_deterministic_plant_reaches_target():
    for steps in (100, 1000):
        spec, ctrl = intro_open(T=2.0, x0=3.0, steps=steps)
        spec = spec.replace(D=spec.D.constant([[0.0]]))
        res = run_monte_carlo(spec, SimConfig(3, 0, ctrl, record_paths=True))
        assert abs(res.mean_terminal_state[0]) < 1e-12
        assert res.modified_cost == pytest.approx(0.0, abs=1e-20)


def test_deterministic_path_first_order():
    # x' = -x + u with u = sin t: Euler error at T is O(h).
    errs = []
    for steps in (100, 200, 400):
        spec = intro_problem(steps=steps).replace(A=intro_problem().A.constant([[-1.0]]),
                                                  D=intro_problem().D.constant([[0.0]]))
        t = spec.grid.nodes
        res = run_monte_carlo(spec, SimConfig(1, 0, schedule_controller(spec, np.sin(t)[:, None])))
        exact = np.exp(-1.0) * 1.0 + 0.5 * (np.sin(1.0) - np.cos(1.0) + np.exp(-1.0))
        errs.append(abs(res.mean_terminal_state[0] - exact))
    assert 0.8 < np.log2(errs[0] / errs[1]) < 1.2
    assert 0.8 < np.log2(errs[1] / errs[2]) < 1.2


def test_deterministic_cost_matches_solver():
    # D = 0, Sigma0 = 0: the modified cost of the regular optimal controller equals x0' P(t0) x0.
    spec = intro_problem(steps=2000).replace(
        R=intro_problem().R.constant([[1.0]]), Q=intro_problem().Q.constant([[1.0]]),
        D=intro_problem().D.constant([[0.0]]))
    syn = synthesize(spec)
    assert syn.mode == "regular"
    res = run_monte_carlo(spec, SimConfig(2, 0, controller_from_synthesis(syn)), syn.filter)
    assert res.modified_cost == pytest.approx(syn.optimal_cost, rel=2e-3)
    assert res.modified_cost == pytest.approx(res.classic_cost, rel=1e-14)


def test_nan_aborts():
    spec, _ = intro_open(steps=50)
    wild = Controller("wild", np.full((51, 1, 1), 1e300), np.zeros((51, 1)))
    with pytest.raises(SimulationError, match="non-finite"):
        run_monte_carlo(spec, SimConfig(4, 0, wild))


def test_demo_longer_horizon():
    rep = demo_intro(T=2.0, trials=4000, seed=3, steps=400)
    assert abs(rep.classic - 2.0) <= 3 * rep.classic_se
    assert rep.modified <= max(0.02, 3 * rep.modified_se)
    assert "classic" in rep.table()


def test_demo_few_trials_runs():
    rep = demo_intro(trials=100, steps=100)
    assert np.isfinite(rep.classic) and rep.classic_se > 0
