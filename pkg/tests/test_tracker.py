import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_tvoc.checks import check_derivatives, check_settling, random_feasible_u, random_objective
from robust_tvoc.config import from_preset
from robust_tvoc.presets import build_scenario
from robust_tvoc.robust import eps_bar
from robust_tvoc.clf import beta
from robust_tvoc.simulator import _objective, prepare
from robust_tvoc.tracker import (BarrierDomainError, BarrierObjective, ConvergenceError, TrackerState,
                                 integrate_frozen, integrate_tracker, objective_eval, optimal_u_oracle, psi,
                                 start_point, tracking_rhs, udot)
from robust_tvoc.dynamics import linear_test_model


def _scalar(mu_decay=0.0, rows=((-2.0, 1.0),), W=(1.0,), gamma=0.0):
    return BarrierObjective(Q=np.eye(1), rows=np.array(rows, dtype=float), W=np.array(W), gamma=gamma,
                            mu0=1.0, mu_decay=mu_decay)


def test_scalar_value_and_gradient():
    ev = objective_eval(_scalar(), np.array([0.0]), 0.0)
    assert ev.value == pytest.approx(0.5)
    assert ev.grad_u[0] == pytest.approx(0.25)
    assert ev.hess_uu[0, 0] == pytest.approx(1.0 + 2.0 / 8.0)


def test_infeasible_point_reports_row():
    obj = _scalar(rows=((-2.0, 1.0), (-5.0, -1.0)), W=(1.0, 1.0))
    with pytest.raises(BarrierDomainError) as info:
        objective_eval(obj, np.array([-6.0]), 0.0)
    assert info.value.row == 1


def test_objective_contract_checks():
    with pytest.raises(ValueError):
        BarrierObjective(Q=np.array([[1.0, 2.0], [0.0, 1.0]]), rows=np.zeros((1, 3)), W=np.ones(1), gamma=0.0)
    with pytest.raises(ValueError):
        BarrierObjective(Q=np.eye(1), rows=np.zeros((2, 2)), W=np.ones(1), gamma=0.0)
    with pytest.raises(ValueError):
        BarrierObjective(Q=np.eye(1), rows=np.zeros((1, 2)), W=-np.ones(1), gamma=0.0)


def test_psi_examples():
    assert np.all(psi(np.zeros(3), 0.7) == 0.0)
    assert psi(np.array([1.0]), 1.0)[0] == pytest.approx(2 * np.pi)
    with pytest.raises(ValueError):
        psi(np.ones(1), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=4), st.floats(1e-3, 10.0))
def test_psi_odd(v, tau):
    v = np.array(v)
    assert np.array_equal(psi(-v, tau), -psi(v, tau))


def test_stationary_point_is_fixed():
    obj = random_objective(np.random.default_rng(3), m=2, mu_decay=0.0)
    u_star = optimal_u_oracle(obj, 0.0, start_point(obj))
    assert np.linalg.norm(udot(obj, u_star, 0.0, 1.0)) < 1e-8


def test_unconstrained_fixed_time_flow():
    obj = BarrierObjective(Q=np.eye(1), rows=np.zeros((0, 2)), W=np.zeros(0), gamma=0.0, mu_decay=0.0)
    assert udot(obj, np.array([0.5]), 0.0, 1.0)[0] == pytest.approx(-psi(np.array([0.5]), 1.0)[0])
    _, us = integrate_frozen(obj, np.array([1.0]), 0.0, 1.0, n_steps=1000)
    assert abs(us[-1, 0]) <= 1e-6


def test_oracle_first_order_and_feasibility():
    rng = np.random.default_rng(8)
    for _ in range(30):
        obj = random_objective(rng)
        u = optimal_u_oracle(obj, 0.3, start_point(obj))
        assert np.linalg.norm(objective_eval(obj, u, 0.3).grad_u) <= 1e-9
        assert np.all(obj.arguments(u) < 0)


@pytest.mark.parametrize("seed", range(5))
def test_oracle_matches_grid_search(seed):
    rng = np.random.default_rng(100 + seed)
    obj = random_objective(rng, m=1)
    lo = hi = None
    c = start_point(obj, margin=0.0)
    WA = obj.W * obj.rows[:, 1]
    c0 = obj.W * obj.rows[:, 0] - obj.gamma
    # interval where every barrier argument is negative
    lo = np.max(np.where(WA < 0, -c0 / np.where(WA < 0, WA, 1), -np.inf))
    hi = np.min(np.where(WA > 0, -c0 / np.where(WA > 0, WA, 1), np.inf))
    grid = np.linspace(lo, hi, 1_000_002)[1:-1]
    z = c0[:, None] + WA[:, None] * grid[None, :]
    vals = 0.5 * obj.Q[0, 0] * grid ** 2 + obj.mu(0.0) * np.sum(-1.0 / z, axis=0)
    u_grid = grid[np.argmin(vals)]
    u = optimal_u_oracle(obj, 0.0, c)
    assert abs(u[0] - u_grid) <= 1e-4


def test_oracle_iteration_cap():
    obj = random_objective(np.random.default_rng(1), m=2)
    with pytest.raises(ConvergenceError) as info:
        optimal_u_oracle(obj, 0.0, start_point(obj), max_iter=1, tol=1e-300)
    assert info.value.grad_norm > 0


def test_derivatives_against_finite_differences():
    for r in check_derivatives(150, seed=21):
        assert r.passed, r.line()


def test_grad_ux_against_finite_differences():
    # re-evaluation mode: rows depend linearly on the state
    rng = np.random.default_rng(2)
    base = np.array([[-1.0, 1.0], [-1.5, -1.0]])
    D = rng.normal(size=(2, 2, 1)) * 0.1

    def rows_fn(x):
        return base + D[..., 0] * x[0], D

    obj = BarrierObjective(Q=np.eye(1), rows=base, W=np.ones(2), gamma=0.0, rows_fn=rows_fn)
    u = np.array([0.2])
    x = np.array([0.3])
    ev = objective_eval(obj, u, 0.1, x)
    h = 1e-6
    fd = (objective_eval(obj, u, 0.1, x + h).grad_u - objective_eval(obj, u, 0.1, x - h).grad_u) / (2 * h)
    assert np.allclose(ev.grad_ux[:, 0], fd, rtol=1e-6)
    model = linear_test_model()
    st_ = TrackerState(u=u, t=0.1, tau=0.5, frozen_poly=None, nominal_x=x)
    xdot = model.f(x) + model.g(x) @ u
    expect = -np.linalg.solve(ev.hess_uu, psi(ev.grad_u, 0.5) + ev.grad_ut + ev.grad_ux @ xdot)
    assert np.allclose(tracking_rhs(st_, obj, model), expect)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_strong_convexity(seed):
    rng = np.random.default_rng(seed)
    obj = random_objective(rng)
    u = random_feasible_u(rng, obj)
    H = objective_eval(obj, u, float(rng.uniform(0, 3))).hess_uu
    assert np.linalg.eigvalsh(H)[0] >= obj.m_J - 1e-9


def test_settling_and_feasibility_preservation():
    r = check_settling(12, seed=5)
    assert r.passed, r.line()


def test_train_interval_endpoint():
    cfg = from_preset("train")
    scn = build_scenario(cfg)
    _, xhat, balls, region, bounds = prepare(scn)
    ebar = eps_bar(beta(scn.clf, scn.model, xhat, "relaxed"), bounds.L, scn.model.box).value
    delta = (ebar - 2 * scn.eps) / bounds.F_bar
    obj = _objective(scn, bounds, xhat, ebar, 0.0)
    u0 = start_point(obj)
    ts, us, xs = integrate_tracker(obj, scn.model, u0, xhat, 0.0, delta, h=scn.h, min_steps=scn.min_steps)
    assert all(obj.strictly_feasible(u) for u in us)
    u_star = optimal_u_oracle(obj, ts[-1], us[-1])
    assert np.linalg.norm(us[-1] - u_star) <= 1e-3
