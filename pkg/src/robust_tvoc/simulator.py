"""Self-triggered closed loop: measure, pick a mode, co-integrate plant and tracker, log."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .clf import BallRadii, ClfSpec, ball_radii, beta, phi
from .dynamics import ModelDomainError, PlantModel
from .robust import (AccuracyViolationError, InfeasiblePointError, Region, RobustBounds,
                     coasting_control, compute_bounds, eps_bar, inflate_constraints,
                     trigger_delta, working_region)
from .tracker import (BarrierDomainError, BarrierObjective, ConvergenceError, build_objective,
                      guarded_advance, optimal_u_oracle, start_point, udot)

EVENT_NAMES = ("measure", "trigger", "enter_target", "enter_core", "coast_start")


class SimulationAbort(RuntimeError):
    """Raised when the loop cannot continue; ``trace`` holds everything logged so far."""

    def __init__(self, message: str, trace: "Trace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Scenario:
    """Fully resolved run description (models built, coordinates shifted)."""

    name: str
    model: PlantModel
    clf: ClfSpec
    eps: float
    r: float
    r_star: float
    r_tilde: float | None
    x0: np.ndarray                 # shifted; true state, or first measurement if x0_is_measurement
    x0_is_measurement: bool
    Q: np.ndarray
    W: np.ndarray
    gamma: float
    mu0: float = 1.0
    mu_decay: float = 0.5
    state_Q: np.ndarray | None = None
    mu_clock: str = "global"       # "global": mu(t); "interval": mu(t - t_k)
    freeze_constraints: bool = True
    coast: str = "zero"            # "zero" or "supmin"
    h: float = 1e-3
    min_steps: int = 20
    horizon: float = 10.0
    seed: int = 0
    n_companions: int = 4
    eps_bar_combine: str = "max"


# -- measurement -------------------------------------------------------------

def measure(x_true, eps: float, rng: np.random.Generator) -> np.ndarray:
    """``x_true`` plus an error drawn uniformly from the closed ``eps``-ball."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x_true = np.asarray(x_true, dtype=float)
    n = x_true.size
    d = rng.standard_normal(n)
    d /= np.linalg.norm(d)
    radius = eps * rng.random() ** (1.0 / n)
    return x_true + radius * d


def companion_offsets(n: int, eps: float, count: int = 4) -> np.ndarray:
    """Initial perturbations on (and for 1-D also inside) the ``eps``-sphere."""
    if count <= 0:
        return np.zeros((0, n))
    if n == 1:
        base = np.array([1.0, -1.0, 0.5, -0.5])
        reps = np.resize(base, count)
        return eps * reps[:, None]
    th = 2.0 * np.pi * np.arange(count) / count
    off = np.zeros((count, n))
    off[:, 0] = np.cos(th)
    off[:, 1] = np.sin(th)
    return eps * off


# -- trace -------------------------------------------------------------------

@dataclass
class IntervalRecord:
    k: int
    t_k: float
    t_end: float
    mode: str
    xhat_k: np.ndarray
    delta: float
    eps_bar: float | None
    rho: float | None
    rows: np.ndarray | None
    u_k: np.ndarray
    e_T: float | None
    truncated: bool
    containment_slack: float | None   # max of |x - xhat_k| - (2 eps + (t - t_k) F_bar)
    start_index: int
    end_index: int
    halvings: int = 0


@dataclass
class Trace:
    scenario: Scenario
    balls: BallRadii
    bounds: RobustBounds
    t: list = field(default_factory=list)
    X: list = field(default_factory=list)        # (1 + companions, n) shifted states per sample
    xhat: list = field(default_factory=list)     # nominal state
    u: list = field(default_factory=list)
    mode: list = field(default_factory=list)
    event: list = field(default_factory=list)
    intervals: list = field(default_factory=list)
    delta_floor: float | None = None
    eps_bar_floor: float | None = None
    coast_u: np.ndarray | None = None
    first_fail: list = field(default_factory=list)

    def arrays(self):
        return (np.asarray(self.t), np.asarray(self.X), np.asarray(self.xhat), np.asarray(self.u))

    @property
    def V(self) -> np.ndarray:
        X = np.asarray(self.X)
        return self.scenario.clf.V(X[:, 0])

    @property
    def phi(self) -> np.ndarray:
        X = np.asarray(self.X)
        return phi(self.scenario.clf, self.scenario.model, np.asarray(self.u), X[:, 0], decay="relaxed")


# -- closed loop -------------------------------------------------------------

def _objective(scn: Scenario, bounds: RobustBounds, xhat, rho: float, t_k: float) -> BarrierObjective:
    model, clf = scn.model, scn.clf
    be = beta(clf, model, xhat, "relaxed")
    poly = inflate_constraints(be, bounds.L, rho, box=model.box)
    rows_fn = None
    if not scn.freeze_constraints:
        n_box = 2 * model.m
        box_part = build_objective(poly, model.box, scn.Q, scn.W, scn.gamma).rows[-n_box:]
        L = bounds.L

        def rows_fn(x, _fd=1e-6):
            def decay_rows(z):
                return inflate_constraints(beta(clf, model, z, "relaxed"), L, rho).rows
            base = decay_rows(x)
            d = np.empty(base.shape + (model.n,))
            for i in range(model.n):
                e = np.zeros(model.n)
                e[i] = _fd
                d[..., i] = (decay_rows(x + e) - decay_rows(x - e)) / (2 * _fd)
            rows = np.vstack([base, box_part])
            drows = np.concatenate([d, np.zeros((n_box, model.m + 1, model.n))])
            return rows, drows

    origin = t_k if scn.mu_clock == "interval" else 0.0
    return build_objective(poly, model.box, scn.Q, scn.W, scn.gamma, mu0=scn.mu0,
                           mu_decay=scn.mu_decay, t_origin=origin, rows_fn=rows_fn,
                           state_Q=scn.state_Q)


def eps_bar_floor(scn: Scenario, bounds: RobustBounds, region: Region, balls: BallRadii,
                  max_points: int = 4000) -> float:
    """Smallest required accuracy over the working region outside the core ball.

    The minimum tends to sit on the core sphere, so that sphere is sampled densely
    (and, in 2-D, refined over the angle) on top of a subsample of the region.
    """
    model, clf = scn.model, scn.clf

    def ebar(P):
        out = []
        for b in beta(clf, model, np.atleast_2d(P), "relaxed"):
            try:
                out.append(eps_bar(b, bounds.L, model.box, combine=scn.eps_bar_combine).value)
            except InfeasiblePointError:
                out.append(-np.inf)
        return np.array(out)

    P = region.points[np.linalg.norm(region.points, axis=1) > balls.r_star]
    if len(P) > max_points:
        P = P[np.linspace(0, len(P) - 1, max_points).astype(int)]
    rad = balls.r_star * (1.0 + 1e-12)
    if model.n == 1:
        ring = np.array([[rad], [-rad]])
    elif model.n == 2:
        th = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
        ring = rad * np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        ring = np.zeros((0, model.n))
    ring = ring[model.in_domain(ring)]
    vals = np.concatenate([ebar(P), ebar(ring)]) if len(ring) else ebar(P)
    best = float(np.min(vals))
    if model.n == 2 and len(ring):
        ring_vals = vals[len(P):]
        j = int(np.argmin(ring_vals))
        th0 = np.arctan2(ring[j, 1], ring[j, 0])
        step = 2.0 * np.pi / 4096
        res = minimize_scalar(lambda a: ebar(rad * np.array([np.cos(a), np.sin(a)]))[0],
                              bounds=(th0 - step, th0 + step), method="bounded",
                              options={"xatol": 1e-12})
        best = min(best, float(res.fun))
    return best


def prepare(scn: Scenario, rng: np.random.Generator | None = None):
    """First measurement, ball radii, working region and bounds for a scenario."""
    rng = np.random.default_rng(scn.seed) if rng is None else rng
    if scn.x0_is_measurement:
        xhat0 = np.asarray(scn.x0, dtype=float)
        x_true0 = measure(xhat0, scn.eps, rng)
    else:
        x_true0 = np.asarray(scn.x0, dtype=float)
        xhat0 = measure(x_true0, scn.eps, rng)
    balls = ball_radii(scn.clf, scn.model, xhat0, scn.eps, scn.r, scn.r_star, scn.r_tilde)
    region = working_region(scn.model, scn.clf, balls)
    bounds = compute_bounds(scn.model, scn.clf, region, balls.r_star)
    return x_true0, xhat0, balls, region, bounds


def run_closed_loop(scn: Scenario) -> Trace:
    """Simulate the measured closed loop over ``[0, horizon]``.

    The true trajectory, ``n_companions`` perturbed copies and the trajectory of
    the first measurement all receive the same input signal.
    """
    if scn.horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(scn.seed)
    model = scn.model
    n, m = model.n, model.m
    x_true0, xhat0, balls, region, bounds = prepare(scn, rng)
    if scn.eps >= bounds.eps_min:
        import warnings
        warnings.warn(f"eps = {scn.eps:g} is not below the sufficient bound {bounds.eps_min:.3g}",
                      stacklevel=2)
    trace = Trace(scn, balls, bounds)
    trace.eps_bar_floor = eps_bar_floor(scn, bounds, region, balls)
    trace.delta_floor = (trace.eps_bar_floor - 2 * scn.eps) / bounds.F_bar

    coast_u = np.zeros(m)
    if scn.coast == "supmin":
        coast_u = coasting_control(model, model.box, region).u
    elif scn.coast != "zero":
        raise ValueError(f"unknown coasting policy {scn.coast!r}")
    trace.coast_u = coast_u

    starts = [x_true0, xhat0] + [x_true0 + o for o in companion_offsets(n, scn.eps, scn.n_companions)]
    Z = np.array(starts)   # row 0 true, row 1 first measurement, rest companions
    nz = Z.size
    t = 0.0
    T = scn.horizon
    xhat = xhat0
    inside_target = bool(np.linalg.norm(Z[0]) <= balls.r)
    inside_core = bool(np.linalg.norm(Z[0]) <= balls.r_star)
    was_coasting = False
    k = 0
    pending = []
    first_frac = 1.0

    def log(t_, Zs, xh, u_, mode, events):
        trace.t.append(t_)
        trace.X.append(Zs.copy())
        trace.xhat.append(xh.copy())
        trace.u.append(u_.copy())
        trace.mode.append(mode)
        trace.event.append("|".join(events))

    def abort(msg):
        raise SimulationAbort(f"t = {t:.6g}, interval {k}: {msg}", trace)

    while t < T - 1e-12:
        if k > 0:
            xhat = measure(Z[0], scn.eps, rng)
        events = ["trigger", "measure"] if k > 0 else ["measure"]
        events += pending
        pending = []
        if np.linalg.norm(xhat) > balls.r_star:
            mode = "tracking"
            try:
                eb = eps_bar(beta(scn.clf, model, xhat, "relaxed"), bounds.L, model.box,
                             combine=scn.eps_bar_combine).value
                trig = trigger_delta(xhat, scn.eps, balls, bounds, eb)
            except (InfeasiblePointError, AccuracyViolationError) as exc:
                abort(str(exc))
            rho = 2.0 * scn.eps + trig.delta * bounds.F_bar
            obj = _objective(scn, bounds, xhat, rho, t)
            u_k = start_point(obj, xhat if obj.rows_fn is not None else None)
            if u_k is None:
                abort(f"empty admissible input set at xhat = {xhat.tolist()} (rho = {rho:.4g})")
        else:
            mode = "coasting"
            eb = None
            rho = None
            obj = None
            trig = trigger_delta(xhat, scn.eps, balls, bounds)
            u_k = coast_u.copy()
            if not was_coasting:
                events.append("coast_start")
        was_coasting = mode == "coasting"
        delta = trig.delta
        if not (np.isfinite(delta) and delta > 0):
            abort(f"non-positive inter-execution time {delta}")
        t_end = min(t + delta, T)
        truncated = t + delta > T + 1e-12
        n_steps = max(int(np.ceil((t_end - t) / scn.h - 1e-9)), scn.min_steps if mode == "tracking" else 1)
        grid = np.linspace(t, t_end, n_steps + 1)
        reeval = obj is not None and obj.rows_fn is not None

        if mode == "tracking":
            tau = delta

            def rhs(s, y, obj=obj, tau=tau):
                S = y[:nz + n].reshape(-1, n)   # plant copies, then the nominal state
                u_ = y[nz + n:]
                F, G = model.fg(S)
                dS = F + G @ u_
                du = udot(obj, u_, s, tau, S[-1] if reeval else None, dS[-1])
                return np.concatenate([dS.ravel(), du])

            def feasible(y, obj=obj):
                return obj.strictly_feasible(y[nz + n:], y[nz:nz + n] if reeval else None)
        else:
            def rhs(s, y, u_=u_k):
                F, G = model.fg(y[:nz + n].reshape(-1, n))
                return np.concatenate([(F + G @ u_).ravel(), np.zeros(m)])

            def feasible(y):
                return True

        y = np.concatenate([Z.ravel(), xhat, u_k])
        start_index = len(trace.t)
        slack = -np.inf
        halvings = 0
        first_fail = None
        for i in range(n_steps):
            if i > 0:
                events = pending
                pending = []
            log(grid[i], y[:nz].reshape(-1, n), y[nz:nz + n], y[nz + n:], mode, events)
            try:
                step = grid[i + 1] - grid[i]
                y, nh, first = guarded_advance(rhs, grid[i], y, step, feasible,
                                               sub0=step * first_frac if i == 0 and mode == "tracking" else None)
                if i == 0 and mode == "tracking":
                    # start the next interval from twice the sub-step accepted here
                    first_frac = min(1.0, 2.0 * first / step)
                halvings += nh
                if nh and first_fail is None:
                    first_fail = i
            except (BarrierDomainError, ModelDomainError) as exc:
                abort(f"integration failed: {exc}")
            x_now = y[:n]
            if mode == "tracking":
                slack = max(slack, np.linalg.norm(x_now - xhat) - (2 * scn.eps + (grid[i + 1] - t) * bounds.F_bar))
            nrm = np.linalg.norm(x_now)
            if nrm <= balls.r and not inside_target:
                pending.append("enter_target")
            if nrm <= balls.r_star and not inside_core:
                pending.append("enter_core")
            inside_target = nrm <= balls.r
            inside_core = nrm <= balls.r_star
        Z = y[:nz].reshape(-1, n)
        u_end = y[nz + n:]
        e_T = None
        if mode == "tracking":
            try:
                u_opt = optimal_u_oracle(obj, t_end, u_end, xhat=y[nz:nz + n] if reeval else None)
                e_T = float(np.linalg.norm(u_end - u_opt))
            except ConvergenceError as exc:
                e_T = float("nan")
                pending.append(f"oracle_failed({exc.grad_norm:.2g})")
        trace.intervals.append(IntervalRecord(
            k=k, t_k=t, t_end=t_end, mode=mode, xhat_k=xhat.copy(), delta=delta, eps_bar=eb, rho=rho,
            rows=None if obj is None else obj.rows[:obj.n_decay_rows].copy(), u_k=u_k.copy(), e_T=e_T,
            truncated=truncated, containment_slack=None if mode != "tracking" else float(slack),
            start_index=start_index, end_index=len(trace.t), halvings=halvings))
        trace.first_fail.append(first_fail)
        t = t_end
        k += 1
    log(t, Z, y[nz:nz + n], y[nz + n:], trace.mode[-1] if trace.mode else "tracking", pending)
    return trace


# -- post-processing ---------------------------------------------------------

@dataclass
class DecayViolation:
    interval: int
    trajectory: int
    lhs: float
    rhs: float


def verify_decay(trace: Trace, clf: ClfSpec | None = None, gamma: float | None = None,
                 rel_tol: float = 1e-3) -> list:
    """Check ``V(end) - V(start) <= -int (w~ - gamma) dt + tol`` on every tracking interval.

    Applies to all logged trajectories; ``tol = rel_tol * delta_k``. Returns the violations.
    """
    clf = trace.scenario.clf if clf is None else clf
    gamma = trace.scenario.gamma if gamma is None else gamma
    t = np.asarray(trace.t)
    X = np.asarray(trace.X)
    out = []
    for rec in trace.intervals:
        if rec.mode != "tracking":
            continue
        sl = slice(rec.start_index, rec.end_index + 1)
        ts, Xs = t[sl], X[sl]
        for j in range(Xs.shape[1]):
            V = clf.V(Xs[:, j])
            w = clf.decay(Xs[:, j], "relaxed") - gamma
            integral = float(np.sum(0.5 * (w[1:] + w[:-1]) * np.diff(ts)))
            lhs = float(V[-1] - V[0])
            if lhs > -integral + rel_tol * rec.delta:
                out.append(DecayViolation(rec.k, j, lhs, -integral))
    return out


def _first_last(t, inside):
    """(first entry time, last exit time or None, stays inside after first entry)."""
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return None, None, False
    first = int(idx[0])
    outside_after = np.flatnonzero(~inside[first:])
    last_exit = None if outside_after.size == 0 else float(t[first + outside_after[-1]])
    return float(t[first]), last_exit, outside_after.size == 0


def summarize(trace: Trace, wall_time: float | None = None) -> dict:
    scn, balls, bounds = trace.scenario, trace.balls, trace.bounds
    t = np.asarray(trace.t)
    X = np.asarray(trace.X)
    norms = np.linalg.norm(X, axis=2)          # (N, trajectories)
    out = {
        "scenario": scn.name,
        "eps": scn.eps,
        "eps_min": bounds.eps_min,
        "F_bar": bounds.F_bar,
        "F_bar0": bounds.F_bar0,
        "L": [float(v) for v in bounds.L],
        "R": balls.R,
        "R_star": balls.R_star,
        "r": balls.r,
        "r_tilde": balls.r_tilde,
        "r_star": balls.r_star,
        "n_samples": int(len(t)),
    }
    for name, rad in (("target", balls.r), ("trigger", balls.r_tilde), ("core", balls.r_star)):
        first, last, stays = _first_last(t, norms[:, 0] <= rad)
        out[f"{name}_entry_time"] = first
        out[f"{name}_last_exit_time"] = last
        out[f"{name}_persistent"] = stays
    comp = [_first_last(t, norms[:, j] <= balls.r) for j in range(1, norms.shape[1])]
    out["companions_entered_target"] = all(c[0] is not None for c in comp)
    out["companions_persistent"] = all(c[2] for c in comp)
    out["max_norm"] = float(np.max(norms[:, 0]))
    out["max_norm_all"] = float(np.max(norms))
    track = [r for r in trace.intervals if r.mode == "tracking"]
    deltas = [r.delta for r in trace.intervals]
    out["n_intervals"] = len(trace.intervals)
    out["n_tracking"] = len(track)
    out["n_coasting"] = len(trace.intervals) - len(track)
    out["min_delta"] = float(min(deltas)) if deltas else None
    out["min_delta_tracking"] = float(min(r.delta for r in track)) if track else None
    out["delta_floor"] = trace.delta_floor
    out["eps_bar_floor"] = trace.eps_bar_floor
    e_long = [r.e_T for r in track if r.delta >= 0.05 and not r.truncated]
    out["max_eT_long"] = float(max(e_long)) if e_long else None
    e_all = [r.e_T for r in track if not r.truncated and r.e_T is not None]
    out["max_eT"] = float(max(e_all)) if e_all else None
    slacks = [r.containment_slack for r in track]
    out["max_containment_slack"] = float(max(slacks)) if slacks else None
    counts = {name: 0 for name in EVENT_NAMES}
    for ev in trace.event:
        for part in filter(None, ev.split("|")):
            counts[part] = counts.get(part, 0) + 1
    out["event_counts"] = counts
    out["decay_violations"] = len(verify_decay(trace))
    if wall_time is not None:
        out["wall_time_s"] = wall_time
    return out


def _fmt(v) -> str:
    return repr(float(v))


def write_trace_csv(trace: Trace, path) -> None:
    """``t,x1..xn,xhat1..xhatn,u1..um,V,phi,mode,event`` in original coordinates."""
    model = trace.scenario.model
    n, m = model.n, model.m
    t, X, xh, U = trace.arrays()
    x_orig = model.to_original(X[:, 0])
    xh_orig = model.to_original(xh)
    V, ph = trace.V, trace.phi
    header = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"xhat{i + 1}" for i in range(n)]
              + [f"u{i + 1}" for i in range(m)] + ["V", "phi", "mode", "event"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(t)):
            w.writerow([_fmt(t[i])] + [_fmt(v) for v in x_orig[i]] + [_fmt(v) for v in xh_orig[i]]
                       + [_fmt(v) for v in U[i]] + [_fmt(V[i]), _fmt(ph[i]), trace.mode[i], trace.event[i]])


def write_companions_csv(trace: Trace, path) -> None:
    """All co-simulated trajectories: column block ``c0`` is the true one, ``c1`` the first measurement."""
    model = trace.scenario.model
    t, X, _, _ = trace.arrays()
    n, c = model.n, X.shape[1]
    header = ["t"] + [f"c{j}_x{i + 1}" for j in range(c) for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(t)):
            row = model.to_original(X[i]).ravel()
            w.writerow([_fmt(t[i])] + [_fmt(v) for v in row])


def write_intervals_csv(trace: Trace, path) -> None:
    """``k,t_k,delta_k,eps_bar,eT_end,feasible_u...`` plus mode and the measurement."""
    model = trace.scenario.model
    n, m = model.n, model.m
    header = (["k", "t_k", "delta_k", "eps_bar", "eT_end"] + [f"feasible_u{i + 1}" for i in range(m)]
              + ["mode", "truncated"] + [f"xhat{i + 1}" for i in range(n)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in trace.intervals:
            w.writerow([r.k, _fmt(r.t_k), _fmt(r.delta), "" if r.eps_bar is None else _fmt(r.eps_bar),
                        "" if r.e_T is None else _fmt(r.e_T)] + [_fmt(v) for v in r.u_k]
                       + [r.mode, int(r.truncated)] + [_fmt(v) for v in model.to_original(r.xhat_k)])


def write_summary(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
