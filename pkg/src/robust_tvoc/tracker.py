"""Barrier-relaxed objective and the fixed-time tracking ODE for its minimiser.

The relaxed objective is

    J~(u, x, t) = 1/2 u'Qu + sum_j mu_j(t) B(W_j c_j(u, x) - gamma),   B(z) = -1/z,

where the ``c_j`` are affine in ``u``: first the inflated decay rows, then the
``2m`` box faces ``u_min - u`` and ``u - u_max``. Only strictly feasible points
(every barrier argument negative) are valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .dynamics import InputBox, ModelDomainError, PlantModel, rk4_step
from .robust import AffinePolytope, pick_feasible_u


class BarrierDomainError(ValueError):
    def __init__(self, row: int, value: float):
        super().__init__(f"barrier argument of row {row} is {value:.3g} (must be < 0)")
        self.row = row


class ConditioningError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


def box_rows(box: InputBox) -> np.ndarray:
    m = box.m
    eye = np.eye(m)
    lower = np.hstack([box.lo[:, None], -eye])   # u_min - u <= 0
    upper = np.hstack([-box.hi[:, None], eye])   # u - u_max <= 0
    return np.vstack([lower, upper])


@dataclass(frozen=True)
class BarrierObjective:
    Q: np.ndarray
    rows: np.ndarray            # (K, m+1) affine constraint rows, decay rows first
    W: np.ndarray               # (K,) positive weights
    gamma: float
    mu0: float = 1.0
    mu_decay: float = 0.5
    t_origin: float = 0.0
    n_decay_rows: int = 0
    state_Q: np.ndarray | None = None   # optional 1/2 x'Sx term; constant in u
    # re-evaluation mode: xhat -> (rows, d rows / d xhat with shape (K, m+1, n))
    rows_fn: Callable[[np.ndarray], tuple] | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if not np.allclose(Q, Q.T):
            raise ValueError("Q must be symmetric")
        if np.linalg.eigvalsh(Q)[0] < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        W = np.asarray(self.W, dtype=float)
        if W.shape != (len(self.rows),) or np.any(W <= 0):
            raise ValueError(f"need {len(self.rows)} positive weights, got {W.shape}")
        # mu_decay = 0 (constant weights) is allowed for synthetic checks only
        if self.mu0 <= 0 or self.mu_decay < 0:
            raise ValueError("barrier weights must be positive and non-increasing")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "W", W)
        # weighted rows reused by every frozen-mode evaluation
        object.__setattr__(self, "_WA", W[:, None] * self.rows[:, 1:])
        object.__setattr__(self, "_c0", W * self.rows[:, 0] - self.gamma)

    @property
    def m(self) -> int:
        return self.Q.shape[0]

    @property
    def m_J(self) -> float:
        return float(np.linalg.eigvalsh(self.Q)[0])

    def mu(self, t: float) -> float:
        return self.mu0 * np.exp(-self.mu_decay * (t - self.t_origin))

    def mu_dot(self, t: float) -> float:
        return -self.mu_decay * self.mu(t)

    def rows_at(self, xhat):
        if self.rows_fn is None or xhat is None:
            return self.rows, None
        return self.rows_fn(xhat)

    def arguments(self, u, xhat=None) -> np.ndarray:
        rows, _ = self.rows_at(xhat)
        return self.W * (rows[:, 0] + rows[:, 1:] @ u) - self.gamma

    def strictly_feasible(self, u, xhat=None) -> bool:
        if self.rows_fn is None or xhat is None:
            return bool(np.all(self._c0 + self._WA @ u < 0))
        return bool(np.all(self.arguments(u, xhat) < 0))


def build_objective(poly: AffinePolytope, box: InputBox, Q, W, gamma: float, mu0: float = 1.0,
                    mu_decay: float = 0.5, t_origin: float = 0.0, rows_fn=None,
                    state_Q=None) -> BarrierObjective:
    rows = np.vstack([poly.rows, box_rows(box)])
    return BarrierObjective(Q=Q, rows=rows, W=W, gamma=gamma, mu0=mu0, mu_decay=mu_decay,
                            t_origin=t_origin, n_decay_rows=len(poly.rows), state_Q=state_Q,
                            rows_fn=rows_fn)


class ObjectiveEval(NamedTuple):
    value: float
    grad_u: np.ndarray
    hess_uu: np.ndarray
    grad_ut: np.ndarray
    grad_ux: np.ndarray | None   # (m, n): d grad_u / d xhat, None when rows are frozen


def objective_eval(obj: BarrierObjective, u, t: float, xhat=None) -> ObjectiveEval:
    u = np.asarray(u, dtype=float)
    rows, drows = obj.rows_at(xhat)
    A = rows[:, 1:]
    z = obj.W * (rows[:, 0] + A @ u) - obj.gamma
    if np.any(z >= 0):
        j = int(np.argmax(z))
        raise BarrierDomainError(j, float(z[j]))
    mu = obj.mu(t)
    inv = 1.0 / z
    b1 = inv * inv             # B'(z)
    b2 = -2.0 * inv * b1       # B''(z)
    WA = obj.W[:, None] * A
    value = 0.5 * u @ obj.Q @ u - mu * np.sum(inv)
    if obj.state_Q is not None and xhat is not None:
        value += 0.5 * xhat @ obj.state_Q @ xhat
    grad = obj.Q @ u + mu * (b1 @ WA)
    hess = obj.Q + mu * (WA.T * b2) @ WA
    grad_t = obj.mu_dot(t) * (b1 @ WA)
    grad_x = None
    if drows is not None:
        # dc_j/dx = d a0_j/dx + sum_i u_i d a_ji/dx ; d a_j/dx enters through B'
        dc = drows[:, 0, :] + np.einsum("i,kin->kn", u, drows[:, 1:, :])
        grad_x = mu * ((WA.T * b2) @ (obj.W[:, None] * dc)
                       + np.einsum("k,kin->in", b1 * obj.W, drows[:, 1:, :]))
    return ObjectiveEval(float(value), grad, hess, grad_t, grad_x)


def psi(v, tau: float) -> np.ndarray:
    """Fixed-time correction ``pi/tau (|v|^0.5 + |v|^1.5) sign(v)``, component-wise."""
    if tau <= 0:
        raise ValueError("settling time must be positive")
    v = np.asarray(v, dtype=float)
    a = np.abs(v)
    return (np.pi / tau) * (np.sqrt(a) + a * np.sqrt(a)) * np.sign(v)


def _solve_small(H, b):
    m = len(b)
    if m == 1:
        if H[0, 0] == 0.0:
            raise np.linalg.LinAlgError("singular")
        return b / H[0, 0]
    if m == 2:
        det = H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
        if det == 0.0 or not np.isfinite(det):
            raise np.linalg.LinAlgError("singular")
        return np.array([H[1, 1] * b[0] - H[0, 1] * b[1], H[0, 0] * b[1] - H[1, 0] * b[0]]) / det
    return np.linalg.solve(H, b)


def _udot_frozen(obj: BarrierObjective, u, t: float, tau: float) -> np.ndarray:
    WA = obj._WA
    z = obj._c0 + WA @ u
    if z.size and z.max() >= 0.0:
        j = int(np.argmax(z))
        raise BarrierDomainError(j, float(z[j]))
    mu = obj.mu(t)
    inv = 1.0 / z
    b1 = inv * inv
    gb = b1 @ WA
    grad = obj.Q @ u + mu * gb
    hess = obj.Q + mu * ((WA.T * (-2.0 * inv * b1)) @ WA)
    rhs = psi(grad, tau) - obj.mu_decay * mu * gb
    try:
        return -_solve_small(hess, rhs)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"singular barrier Hessian at u = {np.asarray(u).tolist()}") from exc


def udot(obj: BarrierObjective, u, t: float, tau: float, xhat=None, xdot=None) -> np.ndarray:
    """Right-hand side of the tracking system for given nominal state and its velocity."""
    if obj.rows_fn is None:
        return _udot_frozen(obj, u, t, tau)
    ev = objective_eval(obj, u, t, xhat)
    rhs = psi(ev.grad_u, tau) + ev.grad_ut
    if ev.grad_ux is not None and xdot is not None:
        rhs = rhs + ev.grad_ux @ xdot
    try:
        return -_solve_small(ev.hess_uu, rhs)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"singular barrier Hessian at u = {u.tolist()}") from exc


@dataclass
class TrackerState:
    u: np.ndarray
    t: float
    tau: float
    frozen_poly: AffinePolytope | None
    nominal_x: np.ndarray


def tracking_rhs(state: TrackerState, obj: BarrierObjective, model: PlantModel) -> np.ndarray:
    xdot = model.f(state.nominal_x) + model.g(state.nominal_x) @ state.u
    xhat = state.nominal_x if obj.rows_fn is not None else None
    return udot(obj, state.u, state.t, state.tau, xhat, xdot)


def start_point(obj: BarrierObjective, xhat=None, margin: float = 1e-6):
    """Chebyshev center of the barrier domain ``{u : W_j c_j(u) - gamma <= -margin}``."""
    rows, _ = obj.rows_at(xhat)
    scaled = obj.W[:, None] * rows
    scaled[:, 0] -= obj.gamma
    return pick_feasible_u(AffinePolytope(rows=scaled, box=None), margin=margin)


def optimal_u_oracle(obj: BarrierObjective, t: float, u_init, xhat=None, tol: float = 1e-10,
                     max_iter: int = 200) -> np.ndarray:
    """Damped Newton from a strictly feasible point; returns the unique minimiser.

    Stops at ``|grad| <= tol`` or when the Newton step falls below floating-point
    resolution of ``u`` (the gradient cannot be resolved further there).
    """
    u = np.array(u_init, dtype=float)
    if not obj.strictly_feasible(u, xhat):
        raise BarrierDomainError(int(np.argmax(obj.arguments(u, xhat))), float(np.max(obj.arguments(u, xhat))))
    gnorm = np.inf
    for _ in range(max_iter):
        ev = objective_eval(obj, u, t, xhat)
        gnorm = float(np.linalg.norm(ev.grad_u))
        if gnorm <= tol:
            return u
        d = -np.linalg.solve(ev.hess_uu, ev.grad_u)
        slope = float(ev.grad_u @ d)
        s = 1.0
        while True:
            cand = u + s * d
            if obj.strictly_feasible(cand, xhat):
                val = objective_eval(obj, cand, t, xhat).value
                # near the optimum the decrease drops below the rounding of the value
                unresolved = -s * slope <= 1e-13 * (1.0 + abs(ev.value))
                if val <= ev.value + 1e-4 * s * slope or unresolved:
                    break
            s *= 0.5
            if s < 1e-30:
                break
        step = s * d
        if np.linalg.norm(step) <= 4.0 * np.finfo(float).eps * (1.0 + np.linalg.norm(u)):
            return u
        u = u + step
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (|grad| = {gnorm:.3g})", gnorm)


# -- guarded integration -----------------------------------------------------

def guarded_advance(rhs, t: float, y: np.ndarray, h: float, feasible, max_halvings: int = 20,
                    sub0: float | None = None):
    """Advance ``y`` from ``t`` to ``t + h`` with RK4, halving the sub-step whenever a
    stage leaves the barrier / model domain or the result is infeasible.

    More than ``max_halvings`` consecutive failures raise; after a success the
    sub-step doubles again (never beyond ``h``). ``sub0`` sets the first trial
    sub-step. Returns ``(y, number of rejected trials, first accepted sub-step)``.
    """
    t_end = t + h
    sub = h if sub0 is None else min(sub0, h)
    first = None
    failures = 0
    streak = 0
    total = 0
    while t < t_end - 1e-15 * max(1.0, abs(t_end)):
        sub = min(sub, t_end - t)
        try:
            nxt = rk4_step(rhs, t, y, sub)
            ok = np.all(np.isfinite(nxt)) and feasible(nxt)
        except (BarrierDomainError, ModelDomainError):
            ok = False
        if ok:
            if first is None:
                first = sub
            t, y = t + sub, nxt
            streak = streak + 1 if failures == 0 else 1
            failures = 0
            if streak >= 2:
                sub = min(2.0 * sub, h)
                streak = 0
            continue
        failures += 1
        total += 1
        if failures > max_halvings:
            raise BarrierDomainError(-1, 0.0)
        sub *= 0.5
    return y, total, first


def integrate_frozen(obj: BarrierObjective, u0, t0: float, tau: float, n_steps: int = 200):
    """Tracker alone (rows frozen, no state coupling) over ``[t0, t0 + tau]``; returns ``(ts, us)``."""
    ts = t0 + np.linspace(0.0, tau, n_steps + 1)
    us = np.empty((n_steps + 1, obj.m))
    us[0] = u0

    def rhs(t, u):
        return _udot_frozen(obj, u, t, tau)

    for i in range(n_steps):
        us[i + 1], _, _ = guarded_advance(rhs, ts[i], us[i], ts[i + 1] - ts[i], obj.strictly_feasible)
    return ts, us


def steps_for(tau: float, h: float, min_steps: int) -> int:
    return max(int(np.ceil(tau / h - 1e-9)), min_steps)


def integrate_tracker(obj: BarrierObjective, model: PlantModel, u0, xhat0, t0: float, tau: float,
                      h: float = 1e-3, min_steps: int = 200):
    """Co-integrate the tracker and the nominal state over ``[t0, t0 + tau]``.

    Returns ``(ts, us, xs)`` sampled on the integration grid.
    """
    m, n = obj.m, model.n
    reeval = obj.rows_fn is not None

    def rhs(t, y):
        x, u = y[:n], y[n:]
        xdot = model.f(x) + model.g(x) @ u
        return np.concatenate([xdot, udot(obj, u, t, tau, x if reeval else None, xdot)])

    def feasible(y):
        return obj.strictly_feasible(y[n:], y[:n] if reeval else None)

    k = steps_for(tau, h, min_steps)
    ts = t0 + np.linspace(0.0, tau, k + 1)
    ys = np.empty((k + 1, n + m))
    ys[0] = np.concatenate([np.asarray(xhat0, dtype=float), np.asarray(u0, dtype=float)])
    for i in range(k):
        ys[i + 1], _, _ = guarded_advance(rhs, ts[i], ys[i], ts[i + 1] - ts[i], feasible)
    return ts, ys[:, n:], ys[:, :n]
