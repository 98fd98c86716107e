import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_tvoc.clf import (InvalidGeometryError, ball_radii, beta, kappa_eval, lotka_volterra_clf, phi,
                             quadratic_clf, train_clf)
from robust_tvoc.dynamics import linear_test_model, lotka_volterra_model, train_equilibrium_input, train_model
from robust_tvoc.robust import Region, working_region


@pytest.fixture(scope="module")
def train():
    model = train_model()
    return model, train_clf(model)


@pytest.fixture(scope="module")
def lv():
    model = lotka_volterra_model()
    return model, lotka_volterra_clf(model)


def test_train_beta_at_33(train):
    model, clf = train
    b = beta(clf, model, np.array([3.0]))
    oracle = 3.0 * (1.516e5 * math.exp(-0.1147 * 33.0) + 1.564e4) / 68200.0
    assert oracle == pytest.approx(0.8394, abs=5e-5)        # frozen value
    assert b[1] == pytest.approx(oracle, rel=1e-12)


def test_train_phi_zero_at_target(train):
    model, clf = train
    u_eq = train_equilibrium_input()
    assert phi(clf, model, np.array([u_eq]), np.zeros(1)) == 0.0


def test_train_kappa_at_target(train):
    model, clf = train
    k = kappa_eval(clf, np.zeros(1))
    assert k[0] == pytest.approx(train_equilibrium_input(), abs=1e-12)
    assert k[0] == pytest.approx(0.794, abs=1e-3)


def test_lv_kappa_and_feasibility(lv):
    model, clf = lv
    assert np.allclose(kappa_eval(clf, np.zeros(2)), [0.5, -0.6], atol=1e-14)
    z = model.to_shifted(np.array([5.0, 8.0]))
    assert phi(clf, model, kappa_eval(clf, z), z) <= 1e-12   # zero up to rounding


def test_linear_beta_hand_computation():
    model = linear_test_model()
    clf = quadratic_clf(np.eye(1), 0.0, 0.5)
    xs = np.linspace(-2, 2, 9)[:, None]
    b = beta(clf, model, xs)
    assert np.allclose(b[:, 0], -xs[:, 0] ** 2)
    assert np.allclose(b[:, 1], xs[:, 0])


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 20.0), st.floats(0.5, 10.0), st.floats(-3.0, 4.0), st.floats(-3.0, 2.0),
       st.sampled_from(["nominal", "relaxed"]))
def test_beta_reconstructs_phi(x1, x2, u1, u2, decay):
    model = lotka_volterra_model()
    clf = lotka_volterra_clf(model)
    z = model.to_shifted(np.array([x1, x2]))
    u = np.array([u1, u2])
    b = beta(clf, model, z, decay)
    assert b[0] + b[1:] @ u == pytest.approx(float(phi(clf, model, u, z, decay)), abs=1e-12)


def test_lv_kappa_in_box_on_working_region(lv):
    model, clf = lv
    balls = ball_radii(clf, model, model.to_shifted(np.array([15.0, 4.0])), 0.01, 0.7, 0.2, 0.3)
    reg = working_region(model, clf, balls)
    rng = np.random.default_rng(0)
    P = reg.points[rng.choice(len(reg.points), 10000, replace=False)]
    K = kappa_eval(clf, P)
    assert np.all(K >= model.box.lo - 1e-12) and np.all(K <= model.box.hi + 1e-12)
    assert np.all(phi(clf, model, K, P) <= 1e-12)


def test_clf_positivity_and_decay_ordering(lv):
    model, clf = lv
    rng = np.random.default_rng(1)
    Z = model.to_shifted(rng.uniform([0.5, 0.5], [20.0, 10.0], size=(5000, 2)))
    assert clf.V(np.zeros((1, 2)))[0] == 0.0
    assert np.all(clf.V(Z) > 0)
    assert np.all(clf.w(Z) > 0)
    assert np.all(clf.w_tilde(Z) <= clf.w(Z))


def test_lv_envelopes_bracket_V(lv):
    model, clf = lv
    rng = np.random.default_rng(2)
    d = rng.normal(size=(3000, 2))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rho = rng.uniform(0.01, 3.0, 3000)
    Z = d * rho[:, None]
    V = clf.V(Z)
    # the sampled sphere is 512 directions; allow the grid gap on both sides
    assert np.all(clf.alpha1(rho) <= V + 1e-3 * V)
    assert np.all(V <= clf.alpha2(rho) * (1 + 1e-3))


@pytest.mark.parametrize("which", ["train", "lv"])
def test_envelope_inversion(which, train, lv):
    model, clf = train if which == "train" else lv
    for rho in np.linspace(0.05, 3.0, 12):
        assert float(clf.alpha1_inv(clf.alpha1(rho))) == pytest.approx(rho, abs=1e-8)


def test_train_ball_radii(train):
    model, clf = train
    b = ball_radii(clf, model, np.array([-3.0]), 0.01, 1.0, 0.5, 0.7)
    assert b.R == pytest.approx(3.02)
    assert b.R_star == pytest.approx(3.02, rel=1e-12)
    assert b.trigger_limit == pytest.approx(1.0)
    assert b.r_tilde == 0.7


def test_lv_published_radii_validate(lv):
    model, clf = lv
    b = ball_radii(clf, model, model.to_shifted(np.array([5.0, 8.0])), 0.01, 0.7, 0.2, 0.3)
    assert b.r_star < b.r_tilde <= b.trigger_limit
    assert b.r_star < b.trigger_limit - 0.02


def test_geometry_errors_quote_inequality(train):
    model, clf = train
    with pytest.raises(InvalidGeometryError, match=r"r\* < alpha2\^-1\(alpha1\(r\)\) - 2 eps"):
        ball_radii(clf, model, np.array([-3.0]), 0.01, 1.0, 0.99)
    with pytest.raises(InvalidGeometryError, match=r"r\* < r~ <= alpha2\^-1\(alpha1\(r\)\)"):
        ball_radii(clf, model, np.array([-3.0]), 0.01, 1.0, 0.5, 1.2)


def test_printed_decay_form_is_sign_indefinite():
    model = lotka_volterra_model()
    clf = lotka_volterra_clf(model, "printed")
    # sign flips between the axes: negative along x1, positive along x2
    assert clf.w(np.array([1.0, 0.0])) < 0 < clf.w(np.array([0.0, 1.0]))


def test_decay_soundness_along_trajectory(train):
    # the fallback feedback keeps phi <= 0, so sampled dV/dt stays below -w~
    from robust_tvoc.dynamics import rk4_step
    model, clf = train
    dt = 1e-2
    traj = [np.array([-3.0])]
    for _ in range(3000):
        traj.append(rk4_step(lambda t, z: model.f(z) + model.g(z) @ kappa_eval(clf, z), 0.0, traj[-1], dt))
    Z = np.array(traj)
    dV = np.gradient(clf.V(Z), dt)
    assert np.all(dV[1:-1] <= -clf.w_tilde(Z[1:-1]) + 1e-3)
