"""Control Lyapunov functions, the affine decay decomposition and ball geometry.

Every function here works in shifted coordinates and is vectorised over leading
axes: a state argument of shape ``(..., n)`` gives results of shape ``(...)``
(scalars) or ``(..., k)`` (vectors).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .dynamics import PlantModel, train_equilibrium_input


class InvalidGeometryError(ValueError):
    """Ball radii violate the nesting required by the stabilization procedure."""


# -- class-K envelopes -------------------------------------------------------

class QuadraticEnvelope:
    """Exact envelopes of ``V = 1/2 z' P z``: ``alpha_i(rho) = lambda_i rho^2 / 2``."""

    def __init__(self, lam_min: float, lam_max: float):
        if lam_min <= 0:
            raise ValueError("quadratic CLF matrix must be positive definite")
        self.lam_min = float(lam_min)
        self.lam_max = float(lam_max)

    def alpha1(self, rho):
        return 0.5 * self.lam_min * np.square(rho)

    def alpha2(self, rho):
        return 0.5 * self.lam_max * np.square(rho)

    def alpha1_inv(self, v):
        return np.sqrt(2.0 * np.asarray(v) / self.lam_min)

    def alpha2_inv(self, v):
        return np.sqrt(2.0 * np.asarray(v) / self.lam_max)


class RadialEnvelope:
    """Numerical envelopes from the min / max of ``V`` over sampled spheres.

    For a convex ``V`` minimised at the origin, ``V`` grows along every ray, so
    the sampled min and max are increasing in the radius and invertible by a
    scalar root search. Directions leaving the model domain count as ``+inf``.
    """

    def __init__(self, V, in_domain, n: int, directions: int = 512, seed: int = 0):
        self.V = V
        self.in_domain = in_domain
        if n == 1:
            self.dirs = np.array([[1.0], [-1.0]])
        elif n == 2:
            th = np.linspace(0.0, 2.0 * np.pi, directions, endpoint=False)
            self.dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
        else:
            d = np.random.default_rng(seed).standard_normal((directions, n))
            self.dirs = d / np.linalg.norm(d, axis=1, keepdims=True)

    def _sphere(self, rho: float) -> np.ndarray:
        pts = rho * self.dirs
        ok = self.in_domain(pts)
        vals = np.full(len(pts), np.inf)
        if np.any(ok):
            vals[ok] = self.V(pts[ok])
        return vals

    def alpha1(self, rho):
        return _vectorize(lambda r: float(np.min(self._sphere(r))), rho)

    def alpha2(self, rho):
        return _vectorize(lambda r: float(np.max(self._sphere(r))), rho)

    def alpha1_inv(self, v):
        return _vectorize(lambda s: _invert(lambda r: float(np.min(self._sphere(r))), s), v)

    def alpha2_inv(self, v):
        return _vectorize(lambda s: _invert(lambda r: float(np.max(self._sphere(r))), s), v)


def _vectorize(fn, arg):
    arr = np.asarray(arg, dtype=float)
    if arr.ndim == 0:
        return fn(float(arr))
    return np.array([fn(float(a)) for a in arr.ravel()]).reshape(arr.shape)


def _invert(fn, target: float) -> float:
    if target <= 0:
        return 0.0
    hi = 1.0
    while fn(hi) < target:
        hi *= 2.0
        if hi > 1e8:
            raise ValueError(f"cannot invert envelope at level {target}")
    return brentq(lambda r: fn(r) - target, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)


# -- CLF specification -------------------------------------------------------

@dataclass(frozen=True)
class ClfSpec:
    name: str
    V: Callable[[np.ndarray], np.ndarray]
    gradV: Callable[[np.ndarray], np.ndarray]
    w: Callable[[np.ndarray], np.ndarray]
    w_tilde: Callable[[np.ndarray], np.ndarray]
    kappa: Callable[[np.ndarray], np.ndarray] | None
    envelope: object
    kappa_region: Callable[[np.ndarray], np.ndarray] | None = None

    def alpha1(self, rho):
        return self.envelope.alpha1(rho)

    def alpha2(self, rho):
        return self.envelope.alpha2(rho)

    def alpha1_inv(self, v):
        return self.envelope.alpha1_inv(v)

    def alpha2_inv(self, v):
        return self.envelope.alpha2_inv(v)

    def decay(self, z, which: str = "nominal"):
        if which == "nominal":
            return self.w(z)
        if which == "relaxed":
            return self.w_tilde(z)
        raise ValueError(f"unknown decay selector {which!r}")


def beta(clf: ClfSpec, model: PlantModel, z, decay: str = "nominal") -> np.ndarray:
    """Coefficients ``(beta_0, ..., beta_m)`` with ``phi(u, z) = beta_0 + sum beta_i u_i``."""
    z = np.asarray(z, dtype=float)
    grad = clf.gradV(z)
    b0 = np.einsum("...i,...i->...", grad, model.f(z)) + clf.decay(z, decay)
    bu = np.einsum("...i,...ij->...j", grad, model.g(z))
    return np.concatenate([np.asarray(b0)[..., None], bu], axis=-1)


def phi(clf: ClfSpec, model: PlantModel, u, z, decay: str = "nominal"):
    """Decay residual ``<grad V, f + g u> + w``; non-positive means admissible."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    xdot = model.f(z) + np.einsum("...ij,...j->...i", model.g(z), u)
    return np.einsum("...i,...i->...", clf.gradV(z), xdot) + clf.decay(z, decay)


def kappa_eval(clf: ClfSpec, z) -> np.ndarray:
    if clf.kappa is None:
        raise ValueError(f"{clf.name}: no fallback feedback defined")
    z = np.asarray(z, dtype=float)
    if clf.kappa_region is not None and not np.all(clf.kappa_region(z)):
        raise ValueError(f"{clf.name}: fallback feedback evaluated outside its validity region")
    return clf.kappa(z)


# -- presets -----------------------------------------------------------------

def train_clf(model: PlantModel, decay_coef: float = 0.025, relax_factor: float = 0.6) -> ClfSpec:
    """``V = z^2/2`` with ``w = c z^2`` and the tanh fallback lever."""
    u_eq = train_equilibrium_input(model.params)
    shift = math.atanh(u_eq)
    v_max = model.params["v_max"] - model.x_star[0]

    return ClfSpec(
        name="train-quadratic",
        V=lambda z: 0.5 * z[..., 0] ** 2,
        gradV=lambda z: np.asarray(z, dtype=float),
        w=lambda z: decay_coef * z[..., 0] ** 2,
        w_tilde=lambda z: relax_factor * decay_coef * z[..., 0] ** 2,
        kappa=lambda z: -np.tanh(z - shift),
        envelope=QuadraticEnvelope(1.0, 1.0),
        kappa_region=lambda z: z[..., 0] < v_max,
    )


def lotka_volterra_clf(model: PlantModel, decay_form: str = "derived", relax_factor: float = 0.5) -> ClfSpec:
    """Logarithmic predator-prey CLF.

    ``decay_form="derived"`` uses ``w = sum z_i tanh z_i``, which is what the
    fallback feedback actually achieves. ``"printed"`` keeps the published
    expression ``w = -z_1 tanh(z_1)/2 + z_2 tanh(z_2)/2`` (sign-indefinite).
    """
    xs = model.x_star
    a, b, c, d = (model.params[k] for k in ("alpha", "beta", "gamma", "delta"))

    def V(z):
        x = z + xs
        return np.sum(x - xs - xs * np.log(x / xs), axis=-1)

    def gradV(z):
        return 1.0 - xs / (z + xs)

    if decay_form == "derived":
        def w(z):
            return np.sum(z * np.tanh(z), axis=-1)
    elif decay_form == "printed":
        def w(z):
            return -0.5 * z[..., 0] * np.tanh(z[..., 0]) + 0.5 * z[..., 1] * np.tanh(z[..., 1])
    else:
        raise ValueError(f"decay_form must be 'derived' or 'printed', got {decay_form!r}")

    def kappa(z):
        x = z + xs
        return np.stack([-a + b * x[..., 1] + np.tanh(-z[..., 0]),
                         c - d * x[..., 0] + np.tanh(-z[..., 1])], axis=-1)

    return ClfSpec(
        name=f"lotka-volterra-log-{decay_form}",
        V=V, gradV=gradV, w=w, w_tilde=lambda z: relax_factor * w(z), kappa=kappa,
        envelope=RadialEnvelope(V, model.in_domain, 2),
        kappa_region=model.in_domain,
    )


def quadratic_clf(P, decay_coef: float, relax_factor: float, kappa=None) -> ClfSpec:
    """Custom ``V = z' P z / 2`` with ``w = c |z|^2`` and ``w~ = factor * w``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if not np.allclose(P, P.T):
        raise ValueError("CLF matrix must be symmetric")
    lam = np.linalg.eigvalsh(P)
    return ClfSpec(
        name="quadratic",
        V=lambda z: 0.5 * np.einsum("...i,ij,...j->...", z, P, z),
        gradV=lambda z: np.asarray(z) @ P,
        w=lambda z: decay_coef * np.sum(np.square(z), axis=-1),
        w_tilde=lambda z: relax_factor * decay_coef * np.sum(np.square(z), axis=-1),
        kappa=kappa,
        envelope=QuadraticEnvelope(lam[0], lam[-1]),
    )


# -- ball geometry -----------------------------------------------------------

@dataclass(frozen=True)
class BallRadii:
    R: float
    R_star: float
    r: float
    r_star: float
    r_tilde: float
    eps: float
    V_hat: float
    overshoot_basis: str  # "start-ball" or "measurement-ball"
    trigger_limit: float  # alpha2^-1(alpha1(r)), largest admissible r_tilde


def ball_sample(radius: float, n: int, n_radial: int = 200, n_angular: int = 512, n_1d: int = 2000,
                center=None, extra_radii=(), seed: int = 0) -> np.ndarray:
    """Deterministic sample of the closed ball: a line in 1-D, radial-angular in 2-D."""
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    if n == 1:
        pts = np.linspace(-radius, radius, n_1d)
        extra = [s * r for r in extra_radii for s in (-1.0, 1.0) if r <= radius]
        pts = np.unique(np.concatenate([pts, extra]))
        return center + pts[:, None]
    if n == 2:
        radii = np.unique(np.concatenate([np.linspace(0.0, radius, n_radial),
                                          [r for r in extra_radii if r <= radius]]))
        th = np.linspace(0.0, 2.0 * np.pi, n_angular, endpoint=False)
        rr, tt = np.meshgrid(radii[radii > 0], th, indexing="ij")
        pts = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1).reshape(-1, 2)
        return center + np.vstack([np.zeros((1, 2)), pts])
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n_radial * n_angular, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(len(d)) ** (1.0 / n)
    return center + d * r[:, None]


def ball_radii(clf: ClfSpec, model: PlantModel, xhat0, eps: float, r: float, r_star: float,
               r_tilde: float | None = None, eps_min: float | None = None) -> BallRadii:
    """Starting, overshoot, target, triggering and core radii for a first measurement.

    ``xhat0`` is in shifted coordinates. When the starting ball reaches outside
    the model domain (the CLF is unbounded there) the overshoot level falls back
    to the maximum of ``V`` over the ``2 eps`` ball around the measurement.
    """
    if r <= 0 or r_star <= 0:
        raise InvalidGeometryError("radii must be positive")
    if eps_min is not None and eps >= eps_min:
        warnings.warn(f"eps = {eps:g} is not below the sufficient bound eps_min = {eps_min:.3g}",
                      stacklevel=2)
    xhat0 = np.asarray(xhat0, dtype=float)
    R = float(np.linalg.norm(xhat0) + 2.0 * eps)
    pts = ball_sample(R, model.n)
    ok = model.in_domain(pts)
    if np.all(ok):
        V_hat = float(np.max(clf.V(pts)))
        basis = "start-ball"
    else:
        near = ball_sample(2.0 * eps, model.n, n_radial=20, n_angular=128, n_1d=201, center=xhat0)
        if not np.all(model.in_domain(near)):
            raise InvalidGeometryError("measurement uncertainty ball leaves the model domain")
        V_hat = float(np.max(clf.V(near)))
        basis = "measurement-ball"
    R_star = float(clf.alpha1_inv(V_hat))
    limit = float(clf.alpha2_inv(clf.alpha1(r)))
    if not r_star < limit - 2.0 * eps:
        raise InvalidGeometryError(
            f"core radius violates r* < alpha2^-1(alpha1(r)) - 2 eps: "
            f"{r_star:g} >= {limit:g} - {2 * eps:g}")
    if r_tilde is None:
        r_tilde = limit
    if not (r_star < r_tilde <= limit + 1e-12):
        raise InvalidGeometryError(
            f"triggering radius violates r* < r~ <= alpha2^-1(alpha1(r)): "
            f"{r_star:g} < {r_tilde:g} <= {limit:g}")
    return BallRadii(R=R, R_star=R_star, r=float(r), r_star=float(r_star), r_tilde=float(r_tilde),
                     eps=float(eps), V_hat=V_hat, overshoot_basis=basis, trigger_limit=limit)
