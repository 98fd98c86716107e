"""Measurement-error robustness: bounds, inflated decay constraints, accuracy and triggering.

Conventions: a ``beta`` vector is ``(beta_0, beta_1, ..., beta_m)`` evaluated at
a measured state, ``L`` the matching Lipschitz constants over the working
region, and an inflation radius ``rho`` is the radius of the state ball the
constraints must cover.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .clf import BallRadii, ClfSpec, ball_sample, beta as beta_of
from .dynamics import InputBox, PlantModel

LIPSCHITZ_SAFETY = 1.05
INTERIOR_MARGIN = 1e-6


class EstimationError(RuntimeError):
    """A bound estimate hit a non-finite sample."""


class InfeasiblePointError(ValueError):
    """No admissible input exists at the measured state, even without inflation."""


class InvalidRelaxationError(ValueError):
    """The relaxed decay is not strictly below the nominal one outside the core ball."""


class AccuracyViolationError(ValueError):
    """The measurement is too coarse for the required accuracy at this state."""


# -- working region ----------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """Finite sample of a compact state set (shifted coordinates)."""

    points: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def ball(cls, radius: float, n: int, center=None, **grid) -> "Region":
        pts = ball_sample(radius, n, center=center, **grid)
        return cls(pts, {"kind": "ball", "radius": float(radius), "n_points": len(pts)})

    @classmethod
    def interval(cls, lo: float, hi: float, n_points: int = 2001) -> "Region":
        pts = np.linspace(lo, hi, n_points)[:, None]
        return cls(pts, {"kind": "interval", "lo": lo, "hi": hi, "n_points": n_points})


def working_region(model: PlantModel, clf: ClfSpec, balls: BallRadii,
                   n_radial: int = 200, n_angular: int = 512, n_1d: int = 2000) -> Region:
    """The set the closed loop is confined to: ``B_{R*}`` intersected with ``{V <= V_hat}``."""
    pts = ball_sample(balls.R_star, model.n, n_radial=n_radial, n_angular=n_angular, n_1d=n_1d,
                      extra_radii=(balls.r_star,))
    ok = model.in_domain(pts)
    pts = pts[ok]
    pts = pts[clf.V(pts) <= balls.V_hat * (1.0 + 1e-12) + 1e-15]
    meta = {"kind": "working", "R_star": balls.R_star, "V_hat": balls.V_hat, "n_points": len(pts),
            "grid": f"{n_1d}" if model.n == 1 else f"{n_radial}x{n_angular}"}
    return Region(pts, meta)


# -- bound estimation --------------------------------------------------------

def estimate_lipschitz(fn, region: Region, fd_step: float = 1e-6, safety: float = LIPSCHITZ_SAFETY) -> float:
    """Largest central-difference gradient norm of ``fn`` over the region, times ``safety``."""
    P = region.points
    n = P.shape[1]
    grads = np.empty_like(P)
    for i in range(n):
        e = np.zeros(n)
        e[i] = fd_step
        grads[:, i] = (fn(P + e) - fn(P - e)) / (2.0 * fd_step)
    bad = ~np.all(np.isfinite(grads), axis=1)
    if np.any(bad):
        raise EstimationError(f"non-finite samples at {P[bad][0].tolist()}")
    return float(np.max(np.linalg.norm(grads, axis=1)) * safety)


def sup_bounds(model: PlantModel, region: Region, box: InputBox | None = None,
               points_per_axis: int = 5, chunk: int = 20000):
    """``(F_bar, F_bar0)``: sup of ``|f + g u|`` over region x box and of ``|f|`` over region.

    The norm is convex in ``u`` so the box corners decide the maximum; a coarse
    box grid is evaluated as well.
    """
    box = box or model.box
    P = region.points
    if len(P) == 0:
        raise ValueError("empty region")
    U = np.unique(np.vstack([box.vertices(), box.grid(points_per_axis)]), axis=0)
    F_bar = 0.0
    F_bar0 = 0.0
    for s in range(0, len(P), chunk):
        Z = P[s:s + chunk]
        F = model.f(Z)
        G = model.g(Z)
        F_bar0 = max(F_bar0, float(np.max(np.linalg.norm(F, axis=1))))
        vel = F[:, None, :] + np.einsum("nij,kj->nki", G, U)
        F_bar = max(F_bar, float(np.max(np.linalg.norm(vel, axis=2))))
    return F_bar, F_bar0


@dataclass(frozen=True)
class RobustBounds:
    L: np.ndarray          # Lipschitz constants of beta_0..beta_m over the working region
    F_bar: float           # sup |f + g u|
    F_bar0: float          # sup |f|
    w_bar: float           # min of w - w~ outside the core ball
    u_M: np.ndarray
    grid_meta: dict = field(default_factory=dict)

    @property
    def eps_min(self) -> float:
        return eps_min(self)


def compute_bounds(model: PlantModel, clf: ClfSpec, region: Region, r_star: float) -> RobustBounds:
    """All constants of the robustness argument, estimated on ``region``.

    ``L_0`` covers ``beta_0`` with both the nominal and the relaxed decay so the
    inflated constraints stay valid whichever decay they are built from.
    """
    P = region.points
    L = np.empty(model.m + 1)
    L[0] = max(estimate_lipschitz(lambda Z: beta_of(clf, model, Z, "nominal")[..., 0], region),
               estimate_lipschitz(lambda Z: beta_of(clf, model, Z, "relaxed")[..., 0], region))
    for i in range(1, model.m + 1):
        L[i] = estimate_lipschitz(lambda Z, i=i: beta_of(clf, model, Z)[..., i], region)
    F_bar, F_bar0 = sup_bounds(model, region)
    outer = P[np.linalg.norm(P, axis=1) >= r_star * (1.0 - 1e-12)]
    if len(outer) == 0:
        raise ValueError("working region has no points outside the core ball")
    w_bar = float(np.min(clf.w(outer) - clf.w_tilde(outer)))
    meta = dict(region.meta)
    meta.update({"lipschitz_safety": LIPSCHITZ_SAFETY, "fd_step": 1e-6, "box_grid": 5})
    return RobustBounds(L=L, F_bar=F_bar, F_bar0=F_bar0, w_bar=w_bar, u_M=model.box.u_M, grid_meta=meta)


def eps_min(bounds: RobustBounds) -> float:
    """Sufficient uniform measurement accuracy ``w_bar / (2 (L_0 + sum L_i u_iM))``."""
    if not bounds.w_bar > 0:
        raise InvalidRelaxationError(
            f"w_bar = {bounds.w_bar:.3g}: relaxed decay must lie strictly below the nominal decay "
            "outside the core ball")
    return 0.5 * bounds.w_bar / (bounds.L[0] + float(np.dot(bounds.L[1:], bounds.u_M)))


# -- inflated constraints ----------------------------------------------------

@dataclass(frozen=True)
class AffinePolytope:
    """Rows ``(a_0, a_1..a_m)`` meaning ``a_0 + sum a_i u_i <= 0``, optionally intersected with a box."""

    rows: np.ndarray
    box: InputBox | None = None
    margin: float = 0.0

    @property
    def m(self) -> int:
        return self.rows.shape[1] - 1

    def halfspaces(self):
        """``(A, b)`` with ``A u <= b`` covering rows and box faces."""
        A = self.rows[:, 1:]
        b = -self.rows[:, 0]
        if self.box is not None:
            eye = np.eye(self.m)
            A = np.vstack([A, -eye, eye])
            b = np.concatenate([b, -self.box.lo, self.box.hi])
        return A, b

    def values(self, u) -> np.ndarray:
        return self.rows[:, 0] + self.rows[:, 1:] @ np.asarray(u, dtype=float)

    def contains(self, u, tol: float = 0.0) -> bool:
        A, b = self.halfspaces()
        return bool(np.all(A @ np.asarray(u, dtype=float) <= b + tol))


def inflate_constraints(beta, L, rho: float, gamma: float = 0.0, box: InputBox | None = None) -> AffinePolytope:
    """The ``2^(m+1)`` sign combinations of ``beta_i +- L_i rho``.

    Any ``u`` satisfying every row satisfies ``phi(u, x) <= gamma`` for all ``x``
    within ``rho`` of the state ``beta`` was evaluated at.
    """
    if rho < 0:
        raise ValueError("inflation radius must be non-negative")
    beta = np.asarray(beta, dtype=float)
    L = np.asarray(L, dtype=float)
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=beta.size)))
    rows = beta + signs * L * rho
    rows[:, 0] -= gamma
    return AffinePolytope(rows=rows, box=box, margin=gamma)


def minimax_value(poly: AffinePolytope) -> float:
    """``min_u max_j row_j(u)`` over the box; the polytope is non-empty iff this is <= 0."""
    m = poly.m
    box = poly.box
    a0, A = poly.rows[:, 0], poly.rows[:, 1:]
    if m == 1:
        # piecewise-linear convex in a scalar: check every breakpoint
        cand = [box.lo[0], box.hi[0]]
        for i, j in itertools.combinations(range(len(a0)), 2):
            da = A[i, 0] - A[j, 0]
            if da != 0:
                u = (a0[j] - a0[i]) / da
                if box.lo[0] <= u <= box.hi[0]:
                    cand.append(u)
        cand = np.array(cand)
        return float(np.min(np.max(a0[:, None] + A[:, :1] * cand[None, :], axis=0)))
    A_ub = np.hstack([A, -np.ones((len(a0), 1))])
    if m == 2 and len(a0) <= 32:
        return _minimax_vertices(A_ub, -a0, box)
    c = np.zeros(m + 1)
    c[-1] = 1.0
    bounds = [(lo, hi) for lo, hi in zip(box.lo, box.hi)] + [(None, None)]
    res = linprog(c, A_ub=A_ub, b_ub=-a0, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"minimax LP failed: {res.message}")
    return float(res.fun)


def _minimax_vertices(A_ub, b, box: InputBox, tol: float = 1e-12) -> float:
    """``min s`` over ``A_ub (u, s) <= b`` and the box, by enumerating vertices (two inputs)."""
    eye = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    G = np.vstack([A_ub, -eye, eye])
    h = np.concatenate([b, -box.lo, box.hi])
    idx = np.array(list(itertools.combinations(range(len(h)), 3)))
    M = G[idx]
    det = np.linalg.det(M)
    good = np.abs(det) > 1e-14 * np.max(np.abs(M), axis=(1, 2)) ** 3
    sol = np.linalg.solve(M[good], h[idx][good][..., None])[..., 0]
    viol = np.max((G @ sol.T - h[:, None]) / (1.0 + np.abs(h))[:, None], axis=0)
    return float(np.min(sol[viol <= tol, 2]))


# -- required accuracy -------------------------------------------------------

@dataclass(frozen=True)
class EpsBar:
    value: float
    branch: str
    eps0: float
    eps1: float | None
    terms: dict = field(default_factory=dict)


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return np.inf if num > 0 else (-np.inf if num < 0 else 0.0)
    return num / den


def _selected_input(b: float, lo: float, hi: float) -> float:
    # the box end that makes b * u as negative as possible
    return lo if b > 0 else hi


def _eps1_m1(beta, L, box):
    b0, b1 = beta
    u = _selected_input(b1, box.lo[0], box.hi[0])
    E1 = _ratio(abs(b1), L[1])
    E01 = _ratio(-(b0 + b1 * u), L[0] + L[1] * abs(u))
    return min(E1, E01), {"E1": E1, "E01": E01}


def _eps1_m2(beta, L, box):
    b0 = beta[0]
    E = {}
    sel = {}
    I2 = []
    for i in (1, 2):
        bi = beta[i]
        E[i] = _ratio(abs(bi), L[i])
        if bi == 0.0:
            continue
        sel[i] = _selected_input(bi, box.lo[i - 1], box.hi[i - 1])
        if b0 + bi * sel[i] <= 0.0:
            I2.append(i)
    num = b0 + sum(beta[i] * sel[i] for i in sel)
    den = L[0] + sum(L[i] * abs(sel[i]) for i in sel)
    E012 = _ratio(-num, den)
    E0 = {i: _ratio(-(b0 + beta[i] * sel[i]), L[0] + L[i] * abs(sel[i])) for i in sel}
    Ebar012 = min(E[1], E[2], E012)
    Ebar0 = {i: min(E[i], E0[i]) for i in I2}
    eps1 = max([Ebar012] + list(Ebar0.values()))
    terms = {"E1": E[1], "E2": E[2], "E012": E012, "Ebar012": Ebar012, "I2": tuple(I2)}
    for i, v in E0.items():
        terms[f"E0{i}"] = v
    for i, v in Ebar0.items():
        terms[f"Ebar0{i}"] = v
    return eps1, terms


def eps_bar(beta, L, box: InputBox, method: str = "auto", combine: str = "max") -> EpsBar:
    """Largest radius around the measured state admitting one robustly decaying input.

    Closed forms exist for one and two inputs; ``method="bisection"`` (and any
    ``m > 2``) searches the radius numerically. ``combine`` selects how the two
    candidate radii merge in the mixed-sign case: ``"max"`` gives the exact
    largest radius, ``"min"`` the more conservative published combination.
    """
    beta = np.asarray(beta, dtype=float)
    L = np.asarray(L, dtype=float)
    m = beta.size - 1
    if method == "bisection" or (method == "auto" and m > 2):
        val = eps_bar_bisection(beta, L, box)
        return EpsBar(val, "bisection", _ratio(-beta[0], L[0]), None)
    if m not in (1, 2):
        raise ValueError("closed-form required accuracy only exists for one or two inputs")
    b0 = beta[0]
    eps0 = _ratio(-b0, L[0])
    vanishes = bool(np.all(beta[1:] == 0.0))
    if vanishes:
        eps1, terms = None, {}
    else:
        eps1, terms = _eps1_m1(beta, L, box) if m == 1 else _eps1_m2(beta, L, box)
    if b0 <= 0 and vanishes:
        value, branch = eps0, "eps0"
    elif b0 > 0 and not vanishes:
        value, branch = eps1, "eps1"
    else:
        cands = [eps0] if eps1 is None else [eps0, eps1]
        value = max(cands) if combine == "max" else min(cands)
        branch = "combined"
    if value < 0:
        raise InfeasiblePointError(
            f"no admissible input at this state (beta = {beta.tolist()}); treat it as inside the core ball")
    return EpsBar(float(value), branch, float(eps0), None if eps1 is None else float(eps1), terms)


def eps_bar_bisection(beta, L, box: InputBox, rtol: float = 1e-12, max_iter: int = 200) -> float:
    """Bracketed root search for the radius where the inflated polytope becomes empty."""
    beta = np.asarray(beta, dtype=float)
    L = np.asarray(L, dtype=float)

    def value(rho):
        return minimax_value(inflate_constraints(beta, L, rho, box=box))

    v0 = value(0.0)
    if v0 > 0:
        raise InfeasiblePointError(f"no admissible input at this state (beta = {beta.tolist()})")
    if v0 == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while value(hi) <= 0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            return np.inf
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if value(mid) <= 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * (1.0 + lo):
            break
    return 0.5 * (lo + hi)


# -- triggering --------------------------------------------------------------

@dataclass(frozen=True)
class Trigger:
    delta: float
    mode: str  # "tracking" or "coasting"


def trigger_delta(xhat, eps: float, balls: BallRadii, bounds: RobustBounds,
                  eps_bar_val: float | None = None) -> Trigger:
    """Time until the next measurement.

    Outside the core ball ``(eps_bar - 2 eps) / F_bar``; inside it
    ``(r~ - 2 eps - r*) / F_bar0``.
    """
    if np.linalg.norm(xhat) > balls.r_star:
        if eps_bar_val is None:
            raise ValueError("required accuracy must be supplied outside the core ball")
        num = eps_bar_val - 2.0 * eps
        if not num > 0:
            raise AccuracyViolationError(
                f"required accuracy {eps_bar_val:.4g} does not exceed 2 eps = {2 * eps:.4g} "
                f"at xhat = {np.asarray(xhat).tolist()}")
        return Trigger(num / bounds.F_bar, "tracking")
    num = balls.r_tilde - 2.0 * eps - balls.r_star
    if not num > 0:
        raise AccuracyViolationError("triggering radius leaves no room above the core ball")
    return Trigger(num / bounds.F_bar0, "coasting")


# -- input selection ---------------------------------------------------------

def pick_feasible_u(poly: AffinePolytope, margin: float = INTERIOR_MARGIN):
    """Chebyshev center of ``{u : A u <= b - margin}``, or ``None`` if that set is empty."""
    A, b = poly.halfspaces()
    b = b - margin
    norms = np.linalg.norm(A, axis=1)
    flat = norms == 0.0
    if np.any(b[flat] < 0):
        return None
    A, b, norms = A[~flat], b[~flat], norms[~flat]
    m = poly.m
    if m == 1:
        a = A[:, 0]
        upper = b[a > 0] / a[a > 0]
        lower = b[a < 0] / a[a < 0]
        hi = np.min(upper) if upper.size else np.inf
        lo = np.max(lower) if lower.size else -np.inf
        if lo > hi or not (np.isfinite(lo) and np.isfinite(hi)):
            return None
        return np.array([0.5 * (lo + hi)])
    A_ub = np.hstack([A, norms[:, None]])
    if m == 2 and len(b) <= 40:
        return _chebyshev_vertices(A_ub, b)
    c = np.zeros(m + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=[(None, None)] * m + [(0, None)], method="highs")
    if res.status != 0:
        return None
    return res.x[:m]


def _chebyshev_vertices(A_ub, b, tol: float = 1e-12):
    """Chebyshev LP in the plane solved by enumerating its vertices.

    The optimum of ``max r  s.t.  a_j u + |a_j| r <= b_j`` (three unknowns) sits
    where three constraints are active, so with few rows every triple is tried.
    """
    idx = np.array(list(itertools.combinations(range(len(b)), 3)))
    M = A_ub[idx]
    rhs = b[idx]
    det = np.linalg.det(M)
    good = np.abs(det) > 1e-14 * np.max(np.abs(M), axis=(1, 2)) ** 3
    if not np.any(good):
        return None
    sol = np.linalg.solve(M[good], rhs[good][..., None])[..., 0]
    scale = 1.0 + np.abs(b)
    viol = np.max((A_ub @ sol.T - b[:, None]) / scale[:, None], axis=0)
    ok = (viol <= tol) & (sol[:, 2] >= -tol)
    if not np.any(ok):
        return None
    cand = sol[ok]
    return cand[int(np.argmax(cand[:, 2])), :2].copy()


@dataclass(frozen=True)
class CoastChoice:
    u: np.ndarray        # input minimising the worst-case speed
    sup: float           # that worst-case speed
    sup_zero: float      # worst-case speed under u = 0


def coasting_control(model: PlantModel, box: InputBox, region: Region, points_per_axis: int = 21,
                     max_points: int = 5000) -> CoastChoice:
    """Input minimising ``sup_x |f + g u|`` over a box grid (maximises the coasting interval)."""
    P = region.points
    if len(P) > max_points:
        P = P[np.linspace(0, len(P) - 1, max_points).astype(int)]
    U = np.unique(np.vstack([box.grid(points_per_axis), np.zeros((1, box.m))]), axis=0)
    F = model.f(P)
    G = model.g(P)
    sups = np.array([np.max(np.linalg.norm(F + G @ u, axis=1)) for u in U])
    k = int(np.argmin(sups))
    zero = float(np.max(np.linalg.norm(F, axis=1)))
    return CoastChoice(u=U[k], sup=float(sups[k]), sup_zero=zero)
