import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_tvoc.dynamics import (DivergedTrajectoryError, InputBox, ModelDomainError, eval_rhs, integrate,
                                  linear_test_model, lotka_volterra_model, step_grid, train_equilibrium_input,
                                  train_model)
from robust_tvoc.clf import kappa_eval, lotka_volterra_clf


def _train_oracle(v, u):
    # written out independently of the model module
    f_res = 5.18 * (v - 5.0) ** 2 + 13046.32
    f_train = 1.516e5 * math.exp(-0.1147 * v) + 1.564e4
    return (-f_res + f_train * u) / 68200.0


def test_train_equilibrium_residual():
    model = train_model()
    u_eq = train_equilibrium_input()
    assert abs(eval_rhs(model, np.zeros(1), np.array([u_eq]))[0]) < 1e-9


@pytest.mark.parametrize("v,u", [(27.0, 1.0), (30.0, 0.0), (33.0, -1.0), (12.5, 0.3)])
def test_train_rhs_matches_hand_formula(v, u):
    model = train_model()
    got = eval_rhs(model, model.to_shifted(np.array([v])), np.array([u]))[0]
    assert got == pytest.approx(_train_oracle(v, u), rel=1e-12, abs=1e-15)


def test_lotka_volterra_equilibrium_and_drift():
    model = lotka_volterra_model()
    z = np.zeros(2)
    assert np.allclose(eval_rhs(model, z, np.array([0.5, -0.6])), 0.0, atol=1e-14)
    assert np.allclose(eval_rhs(model, z, np.zeros(2)), [-5.0, 2.4], atol=1e-14)


def test_dimension_mismatch_rejected():
    model = lotka_volterra_model()
    with pytest.raises(ValueError):
        eval_rhs(model, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        eval_rhs(model, np.zeros(2), np.zeros(1))


def test_domain_guards():
    train = train_model()
    with pytest.raises(ModelDomainError):
        eval_rhs(train, train.to_shifted(np.array([40.5])), np.zeros(1))
    lv = lotka_volterra_model()
    with pytest.raises(ModelDomainError):
        eval_rhs(lv, lv.to_shifted(np.array([-1.0, 2.0])), np.zeros(2))


def test_input_box():
    box = InputBox([-3.0, -3.0], [4.0, 2.0])
    assert np.array_equal(box.u_M, [4.0, 3.0])
    assert len(box.vertices()) == 4
    with pytest.raises(ValueError):
        InputBox([0.5], [1.0])


def test_integrator_exact_decay():
    model = linear_test_model()
    ts, zs = integrate(model, [1.0], lambda t: np.zeros(1), (0.0, 1.0), h=1e-3)
    assert abs(zs[-1, 0] - math.exp(-1.0)) < 1e-6
    assert len(ts) == math.ceil(1.0 / 1e-3) + 1
    assert ts[0] == 0.0 and ts[-1] == 1.0


def test_integrator_fourth_order():
    model = linear_test_model()
    errs = []
    for h in (0.2, 0.1):
        _, zs = integrate(model, [1.0], lambda t: np.zeros(1), (0.0, 1.0), h=h)
        errs.append(abs(zs[-1, 0] - math.exp(-1.0)))
    assert errs[0] / errs[1] >= 12.0


def test_step_grid_short_last_step():
    ts = step_grid(0.0, 1.05, 0.1)
    assert len(ts) == 12 and ts[-1] == 1.05
    assert ts[-1] - ts[-2] == pytest.approx(0.05)


def test_lotka_volterra_equilibrium_under_feedback():
    model = lotka_volterra_model()
    clf = lotka_volterra_clf(model)
    u_eq = kappa_eval(clf, np.zeros(2))
    _, zs = integrate(model, np.zeros(2), lambda t: u_eq, (0.0, 10.0), h=1e-2)
    assert np.max(np.abs(zs)) < 1e-6


def test_divergence_reported():
    model = linear_test_model(a=1.0)
    with pytest.raises(DivergedTrajectoryError):
        integrate(model, [1.0], lambda t: np.array([np.inf]), (0.0, 1.0), h=0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 20.0), st.floats(0.5, 10.0), st.floats(-3.0, 4.0), st.floats(-3.0, 2.0))
def test_shift_consistency_lotka_volterra(x1, x2, u1, u2):
    model = lotka_volterra_model()
    x = np.array([x1, x2])
    u = np.array([u1, u2])
    direct = model.f_raw(x) + model.g_raw(x) @ u
    assert np.allclose(eval_rhs(model, model.to_shifted(x), u), direct, rtol=1e-13, atol=1e-13)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 39.9), st.floats(-1.0, 1.0))
def test_shift_consistency_train(v, u):
    model = train_model()
    got = eval_rhs(model, model.to_shifted(np.array([v])), np.array([u]))[0]
    assert got == pytest.approx(_train_oracle(v, u), rel=1e-11, abs=1e-14)
