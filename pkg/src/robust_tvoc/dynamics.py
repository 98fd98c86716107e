"""Input-affine plant models and the fixed-step RK4 integrator.

All models are evaluated in target-shifted coordinates ``z = x - x_star`` so the
equilibrium of interest sits at the origin. The raw evaluators work on the
original coordinates and accept arrays with arbitrary leading dimensions, so a
whole sampling grid of shape ``(N, n)`` can be pushed through in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class ModelDomainError(ValueError):
    """Raised when a model is evaluated outside its admissible state region."""


class DivergedTrajectoryError(RuntimeError):
    """Raised when integration produces a non-finite state."""

    def __init__(self, message: str, last_time: float):
        super().__init__(message)
        self.last_time = last_time


@dataclass(frozen=True)
class InputBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("input box bounds must have equal shape")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("input box must contain the origin (lo <= 0 <= hi)")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def m(self) -> int:
        return self.lo.size

    @property
    def u_M(self) -> np.ndarray:
        return np.maximum(np.abs(self.lo), self.hi)

    def vertices(self) -> np.ndarray:
        """All 2^m corners, shape (2^m, m)."""
        grids = np.meshgrid(*[(a, b) for a, b in zip(self.lo, self.hi)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def grid(self, points_per_axis: int) -> np.ndarray:
        axes = [np.linspace(a, b, points_per_axis) for a, b in zip(self.lo, self.hi)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))


@dataclass(frozen=True)
class PlantModel:
    """Input-affine dynamics ``xdot = f(x) + g(x) u``.

    ``f_raw`` and ``g_raw`` take original coordinates with shape ``(..., n)`` and
    return ``(..., n)`` and ``(..., n, m)`` respectively. ``domain`` returns a
    boolean mask of admissible points (same leading shape).
    """

    name: str
    n: int
    m: int
    f_raw: Callable[[np.ndarray], np.ndarray]
    g_raw: Callable[[np.ndarray], np.ndarray]
    x_star: np.ndarray
    box: InputBox
    params: Mapping[str, float] = field(default_factory=dict)
    domain: Callable[[np.ndarray], np.ndarray] | None = None
    domain_text: str = ""

    def to_original(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) + self.x_star

    def to_shifted(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) - self.x_star

    def in_domain(self, z) -> np.ndarray:
        x = self.to_original(z)
        if self.domain is None:
            return np.ones(x.shape[:-1], dtype=bool)
        return self.domain(x)

    def _check(self, z):
        if self.domain is None:
            return
        ok = self.in_domain(z)
        if not np.all(ok):
            bad = np.asarray(self.to_original(z))
            if bad.ndim > 1:
                bad = bad[~ok][0]
            raise ModelDomainError(
                f"{self.name}: state {bad.tolist()} outside admissible region ({self.domain_text})"
            )

    def f(self, z, check: bool = True) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if check:
            self._check(z)
        return self.f_raw(z + self.x_star)

    def g(self, z, check: bool = True) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if check:
            self._check(z)
        return self.g_raw(z + self.x_star)

    def fg(self, z, check: bool = True):
        """``(f(z), g(z))`` with a single domain check."""
        z = np.asarray(z, dtype=float)
        if check:
            self._check(z)
        x = z + self.x_star
        return self.f_raw(x), self.g_raw(x)


def eval_rhs(model: PlantModel, z, u) -> np.ndarray:
    """Return ``f(z) + g(z) u`` for a single state (shifted coordinates)."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if z.shape != (model.n,) or u.shape != (model.m,):
        raise ValueError(
            f"{model.name}: expected state shape ({model.n},) and input shape ({model.m},), "
            f"got {z.shape} and {u.shape}"
        )
    out = model.f(z) + model.g(z) @ u
    if not np.all(np.isfinite(out)):
        raise ModelDomainError(f"{model.name}: non-finite dynamics at x = {model.to_original(z).tolist()}")
    return out


def eval_rhs_batch(model: PlantModel, Z, U) -> np.ndarray:
    """Vectorised ``f + g u`` for stacked states ``(N, n)`` and inputs ``(N, m)`` or ``(m,)``."""
    Z = np.asarray(Z, dtype=float)
    U = np.broadcast_to(np.asarray(U, dtype=float), Z.shape[:-1] + (model.m,))
    return model.f(Z) + np.einsum("...ij,...j->...i", model.g(Z), U)


# -- integration -------------------------------------------------------------

def rk4_step(rhs: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_grid(t0: float, t1: float, h: float) -> np.ndarray:
    """Time grid with step ``h`` whose last step is shortened to land on ``t1``."""
    if h <= 0:
        raise ValueError("step must be positive")
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    n = max(1, math.ceil((t1 - t0) / h - 1e-9))
    ts = t0 + h * np.arange(n + 1)
    ts[-1] = t1
    return ts


def integrate(model: PlantModel, z0, control: Callable[[float], np.ndarray],
              span: Sequence[float], h: float = 1e-3):
    """Integrate the plant under an open-loop policy ``control(t)``.

    Returns ``(ts, zs)`` with ``zs.shape == (len(ts), n)``; both endpoints included.
    """
    t0, t1 = float(span[0]), float(span[1])
    ts = step_grid(t0, t1, h)

    def rhs(t, z):
        return model.f(z) + model.g(z) @ np.atleast_1d(control(t))

    zs = np.empty((ts.size, model.n))
    zs[0] = np.asarray(z0, dtype=float)
    for i in range(ts.size - 1):
        try:
            nxt = rk4_step(rhs, ts[i], zs[i], ts[i + 1] - ts[i])
        except ModelDomainError as exc:
            raise DivergedTrajectoryError(str(exc), float(ts[i])) from exc
        if not np.all(np.isfinite(nxt)):
            raise DivergedTrajectoryError(
                f"{model.name}: non-finite state after t = {ts[i]:.6g}", float(ts[i]))
        zs[i + 1] = nxt
    return ts, zs


# -- registered models -------------------------------------------------------

TRAIN_PARAMS = {
    "p": 5.18,          # kg/m
    "q": 13046.32,      # N
    "mass": 68200.0,    # kg
    "k1": 1.516e5,      # kg m / s^2
    "k2": 0.1147,       # s / m
    "k3": 1.564e4,      # kg m / s^2
    "v_wind": 5.0,      # m/s
    "x_star": 30.0,     # m/s
    "v_max": 40.0,      # m/s, validity limit of the decay estimate
}

LOTKA_VOLTERRA_PARAMS = {
    "alpha": 1.1,   # prey growth rate
    "beta": 0.4,    # prey death rate
    "gamma": 0.4,   # predator death rate
    "delta": 0.1,   # predator growth rate
    "x1_star": 10.0,
    "x2_star": 4.0,
}


def train_forces(params: Mapping[str, float]):
    p, q, vw = params["p"], params["q"], params["v_wind"]
    k1, k2, k3 = params["k1"], params["k2"], params["k3"]

    def f_res(v):
        return p * (v - vw) ** 2 + q

    def f_train(v):
        return k1 * np.exp(-k2 * v) + k3

    return f_res, f_train


def train_model(params: Mapping[str, float] | None = None) -> PlantModel:
    """Longitudinal train velocity, lever position ``u`` in [-1, 1]."""
    prm = dict(TRAIN_PARAMS)
    prm.update(params or {})
    f_res, f_train = train_forces(prm)
    mass = prm["mass"]

    def f_raw(x):
        return -f_res(x) / mass

    def g_raw(x):
        return (f_train(x) / mass)[..., None]

    v_max = prm["v_max"]
    return PlantModel(
        name="train", n=1, m=1, f_raw=f_raw, g_raw=g_raw,
        x_star=np.array([prm["x_star"]]), box=InputBox([-1.0], [1.0]), params=prm,
        domain=lambda x: x[..., 0] < v_max, domain_text=f"velocity < {v_max} m/s",
    )


def train_equilibrium_input(params: Mapping[str, float] | None = None) -> float:
    prm = dict(TRAIN_PARAMS)
    prm.update(params or {})
    f_res, f_train = train_forces(prm)
    return float(f_res(prm["x_star"]) / f_train(prm["x_star"]))


def lotka_volterra_model(params: Mapping[str, float] | None = None) -> PlantModel:
    """Predator-prey model with per-species harvesting/stocking inputs."""
    prm = dict(LOTKA_VOLTERRA_PARAMS)
    prm.update(params or {})
    a, b, c, d = prm["alpha"], prm["beta"], prm["gamma"], prm["delta"]

    def f_raw(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([a * x1 - b * x1 * x2, -c * x2 + d * x1 * x2], axis=-1)

    def g_raw(x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = x[..., 0]
        out[..., 1, 1] = x[..., 1]
        return out

    return PlantModel(
        name="lotka-volterra", n=2, m=2, f_raw=f_raw, g_raw=g_raw,
        x_star=np.array([prm["x1_star"], prm["x2_star"]]),
        box=InputBox([-3.0, -3.0], [4.0, 2.0]), params=prm,
        domain=lambda x: np.all(x > 0, axis=-1), domain_text="both populations positive",
    )


def linear_test_model(a: float = -1.0, b: float = 1.0, box=(-1.0, 1.0)) -> PlantModel:
    """Scalar ``xdot = a x + b u`` used for integrator and plumbing checks."""

    def f_raw(x):
        return a * x

    def g_raw(x):
        return np.full(x.shape + (1,), b)

    return PlantModel(
        name="linear-test", n=1, m=1, f_raw=f_raw, g_raw=g_raw,
        x_star=np.zeros(1), box=InputBox([box[0]], [box[1]]), params={"a": a, "b": b},
    )


def _term_sum(terms, x):
    # term = coef * (x - shift)^power * exp(rate * x)
    out = np.zeros_like(x)
    for coef, power, shift, rate in terms:
        out = out + coef * (x - shift) ** power * np.exp(rate * x)
    return out


def scalar_term_model(f_terms, g_terms, x_star: float, box, x_max: float | None = None,
                      x_min: float | None = None, name: str = "custom") -> PlantModel:
    """Scalar model assembled from ``[coef, power, shift, exp_rate]`` coefficient rows."""
    f_terms = [tuple(float(v) for v in t) for t in f_terms]
    g_terms = [tuple(float(v) for v in t) for t in g_terms]
    for t in f_terms + g_terms:
        if len(t) != 4:
            raise ValueError("each term needs [coef, power, shift, exp_rate]")

    def f_raw(x):
        return _term_sum(f_terms, x)

    def g_raw(x):
        return _term_sum(g_terms, x)[..., None]

    def domain(x):
        ok = np.ones(x.shape[:-1], dtype=bool)
        if x_max is not None:
            ok &= x[..., 0] < x_max
        if x_min is not None:
            ok &= x[..., 0] > x_min
        return ok

    return PlantModel(
        name=name, n=1, m=1, f_raw=f_raw, g_raw=g_raw, x_star=np.array([float(x_star)]),
        box=InputBox([box[0]], [box[1]]), params={"x_star": float(x_star)},
        domain=domain, domain_text=f"{x_min} < x < {x_max}",
    )
