"""Randomised property suites for the tracker and the robust-constraint machinery.

Each suite returns a :class:`CheckResult` with the worst deviation seen, so the
same code backs the ``verify`` subcommand and the test-suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clf import ClfSpec, beta, phi
from .dynamics import InputBox, PlantModel
from .robust import (InfeasiblePointError, Region, RobustBounds, eps_bar, eps_bar_bisection,
                     inflate_constraints, minimax_value, pick_feasible_u)
from .tracker import (BarrierObjective, box_rows, integrate_frozen, objective_eval, optimal_u_oracle,
                      start_point)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    samples: int
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{tag} {self.name}: worst {self.worst:.3g} vs tol {self.tolerance:.3g} over {self.samples}{extra}"


# -- random instances ----------------------------------------------------------

def random_box(rng, m: int) -> InputBox:
    return InputBox(-rng.uniform(0.5, 3.0, m), rng.uniform(0.5, 3.0, m))


def random_objective(rng, m: int | None = None, n_rows: int | None = None,
                     mu_decay: float | None = None) -> BarrierObjective:
    """Strongly convex objective whose rows are strictly feasible at a random centre."""
    m = int(rng.integers(1, 3)) if m is None else m
    n_rows = int(rng.integers(2, 7)) if n_rows is None else n_rows
    B = rng.normal(size=(m, m))
    Q = B @ B.T + rng.uniform(0.2, 2.0) * np.eye(m)
    A = rng.normal(size=(n_rows, m))
    center = rng.uniform(-0.4, 0.4, m)
    slack = rng.uniform(0.05, 1.0, n_rows)
    rows = np.vstack([np.hstack([(-slack - A @ center)[:, None], A]), box_rows(random_box(rng, m))])
    W = rng.uniform(0.5, 3.0, len(rows))
    return BarrierObjective(Q=Q, rows=rows, W=W, gamma=float(rng.uniform(0.0, 0.05)),
                            mu0=float(rng.uniform(0.2, 2.0)),
                            mu_decay=float(rng.uniform(0.1, 1.0)) if mu_decay is None else mu_decay,
                            n_decay_rows=n_rows)


def random_feasible_u(rng, obj: BarrierObjective) -> np.ndarray:
    """A point strictly inside the barrier domain, away from its centre."""
    c = start_point(obj, margin=0.0)
    d = rng.normal(size=obj.m)
    d /= np.linalg.norm(d)
    WA = obj.W[:, None] * obj.rows[:, 1:]
    z0 = obj.arguments(c)
    speed = WA @ d
    with np.errstate(divide="ignore"):
        lim = np.where(speed > 0, -z0 / speed, np.inf)
    return c + rng.uniform(0.0, 0.9) * min(float(np.min(lim)), 10.0) * d


def _rel(a, b) -> float:
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


# -- tracker suites --------------------------------------------------------------

def check_derivatives(n_points: int = 1000, seed: int = 0, tol: float = 1e-5) -> list:
    """Analytic gradient, Hessian and time derivative against central differences."""
    rng = np.random.default_rng(seed)
    worst = {"grad_u": 0.0, "hess_uu": 0.0, "grad_ut": 0.0}
    min_gap = np.inf
    for _ in range(n_points):
        obj = random_objective(rng)
        u = random_feasible_u(rng, obj)
        t = float(rng.uniform(0.0, 3.0))
        ev = objective_eval(obj, u, t)
        dist = float(-np.max(obj.arguments(u)) / np.max(np.linalg.norm(obj.W[:, None] * obj.rows[:, 1:], axis=1)))
        h = 2e-4 * dist
        g = np.empty(obj.m)
        H = np.empty((obj.m, obj.m))
        for i in range(obj.m):
            e = np.zeros(obj.m)
            e[i] = h
            g[i] = (objective_eval(obj, u + e, t).value - objective_eval(obj, u - e, t).value) / (2 * h)
            H[:, i] = (objective_eval(obj, u + e, t).grad_u - objective_eval(obj, u - e, t).grad_u) / (2 * h)
        ht = 1e-4
        gt = (objective_eval(obj, u, t + ht).grad_u - objective_eval(obj, u, t - ht).grad_u) / (2 * ht)
        worst["grad_u"] = max(worst["grad_u"], _rel(ev.grad_u, g))
        worst["hess_uu"] = max(worst["hess_uu"], _rel(ev.hess_uu, H))
        worst["grad_ut"] = max(worst["grad_ut"], _rel(ev.grad_ut, gt))
        min_gap = min(min_gap, float(np.linalg.eigvalsh(ev.hess_uu)[0] - obj.m_J))
    out = [CheckResult(f"derivative {k} vs finite differences", v <= tol, v, tol, n_points)
           for k, v in worst.items()]
    out.append(CheckResult("strong convexity lambda_min(H) - m_J", min_gap >= -1e-9 * 1.0, -min_gap, 1e-9,
                           n_points, f"smallest margin {min_gap:.3g}"))
    return out


def check_settling(n_instances: int = 50, seed: int = 1, tol: float = 1e-3, n_steps: int = 200) -> CheckResult:
    """Frozen, constant-weight instances reach the Newton minimiser by ``t = tau``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    feas = -np.inf
    for _ in range(n_instances):
        obj = random_objective(rng, mu_decay=0.0)
        u0 = start_point(obj)
        tau = float(rng.uniform(0.05, 2.0))
        ts, us = integrate_frozen(obj, u0, 0.0, tau, n_steps)
        feas = max(feas, max(float(np.max(obj.arguments(u))) for u in us))
        u_star = optimal_u_oracle(obj, ts[-1], us[-1])
        worst = max(worst, float(np.linalg.norm(us[-1] - u_star)))
    return CheckResult("fixed-time settling e_T(tau)", worst <= tol and feas < 0, worst, tol, n_instances,
                       f"max barrier argument {feas:.3g}")


# -- robust suites ---------------------------------------------------------------

def random_eps_instance(rng, m: int):
    """Random ``(beta, L, box)`` with a non-empty polytope at zero radius."""
    while True:
        box = random_box(rng, m)
        b = rng.normal(size=m + 1)
        if rng.random() < 0.1:
            b[1 + rng.integers(m)] = 0.0
        L = rng.uniform(0.05, 2.0, m + 1)
        if minimax_value(inflate_constraints(b, L, 0.0, box=box)) < -1e-9:
            return b, L, box


def check_eps_bar_oracle(n_instances: int = 1000, seed: int = 2, tol: float = 1e-6) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for m in (1, 2):
        worst = 0.0
        for _ in range(n_instances):
            b, L, box = random_eps_instance(rng, m)
            closed = eps_bar(b, L, box).value
            bis = eps_bar_bisection(b, L, box)
            if np.isinf(closed) or np.isinf(bis):
                err = 0.0 if closed == bis else np.inf
            else:
                err = abs(closed - bis) / max(abs(bis), 1e-12)
            worst = max(worst, err)
        out.append(CheckResult(f"required accuracy closed form vs bisection (m={m})", worst <= tol,
                               worst, tol, n_instances))
    return out


def check_constraint_soundness(model: PlantModel, clf: ClfSpec, bounds: RobustBounds, region: Region,
                               r_star: float, gamma: float = 0.01, n_centers: int = 1000,
                               n_states: int = 100, seed: int = 3, tol: float = 1e-9) -> CheckResult:
    """Inputs feasible for the inflated rows keep ``phi <= gamma`` across the covered ball."""
    rng = np.random.default_rng(seed)
    P = region.points[np.linalg.norm(region.points, axis=1) > r_star]
    worst = -np.inf
    total = 0
    used = 0
    while used < n_centers:
        xh = P[rng.integers(len(P))]
        be = beta(clf, model, xh, "relaxed")
        try:
            ebar = eps_bar(be, bounds.L, model.box).value
        except InfeasiblePointError:
            continue
        rho = float(rng.uniform(0.0, min(ebar, 10.0)))
        poly = inflate_constraints(be, bounds.L, rho, gamma=gamma, box=model.box)
        c = pick_feasible_u(poly, margin=0.0)
        if c is None:
            continue
        # random feasible input: shrink a random box point towards the centre until feasible
        u = rng.uniform(model.box.lo, model.box.hi)
        for _ in range(60):
            if poly.contains(u):
                break
            u = 0.5 * (u + c)
        else:
            u = c
        d = rng.normal(size=(n_states, model.n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        X = xh + d * (rho * rng.random(n_states) ** (1.0 / model.n))[:, None]
        X = X[model.in_domain(X)]
        # the Lipschitz bounds are only claimed on the sampled working set
        X = X[clf.V(X) <= np.max(clf.V(region.points)) + 1e-12]
        if len(X) == 0:
            continue
        vals = phi(clf, model, np.broadcast_to(u, (len(X), model.m)), X, decay="relaxed")
        worst = max(worst, float(np.max(vals)) - gamma)
        total += len(X)
        used += 1
    return CheckResult("inflated constraints imply phi <= gamma", worst <= tol, worst, tol, total)
