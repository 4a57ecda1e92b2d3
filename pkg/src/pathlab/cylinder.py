"""Cylinder functions on path space and their parallel gradients.

A cylinder function is F(gamma) = f(gamma(t_1), ..., gamma(t_N)).  Its
parallel gradient at time s is the sum over partition times t_a >= s of the
slot gradients, each expressed in the initial frame (equivalently: the frame
components of the slot gradient with respect to the transported frame at t_a).

Conditional quantities F_t = E_t[F] and their gradients are estimated by
nested Monte Carlo: continuations from (X_t, U_t), plus coupled continuations
from geodesically perturbed start points for the derivative in the current
point.  One-point functions may register a closed-form heat flow instead
(euclidean Gaussian convolutions; spherical harmonic expansions on spheres).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from numpy.polynomial import legendre

from . import geometry as geo
from .pathsim import (ConfigurationError, FramedPath, PathEnsemble, RngStream, TimeGrid,
                      offset_starts, walk)

TIME_TOL = 1e-10


class CapabilityError(RuntimeError):
    """Requested quantity is not available for this function or manifold."""


# ---------------------------------------------------------------------------
# one-point building blocks

def _amb(m, y, vec):
    """Riemannian gradient of the ambient linear map y -> <vec, y>_euclid."""
    vec = np.broadcast_to(np.asarray(vec, dtype=float), np.shape(y))
    if m.kind == "hyperbolic":
        vec = vec.copy()
        vec[..., 0] = -vec[..., 0]
    return geo.project_tangent(m, y, vec)


class PointFunction:
    """Smooth function on M with gradient; subclasses may add a closed-form
    euclidean heat semigroup ``semigroup(tau, y) -> (value, grad, hess)`` and a
    spherical one ``sphere_semigroup(m, tau, y)``.  Hessians are returned as
    ambient matrices acting on tangent vectors."""
    name = "point"

    def value(self, m, y):
        raise NotImplementedError

    def grad(self, m, y):
        raise NotImplementedError

    def semigroup(self, tau, y):
        return None

    def sphere_semigroup(self, m, tau, y):
        return None

    @property
    def has_semigroup(self) -> bool:
        return type(self).semigroup is not PointFunction.semigroup

    def supports_heat_flow(self, m) -> bool:
        if m.kind == "euclidean":
            return self.has_semigroup
        if m.kind == "sphere":
            return type(self).sphere_semigroup is not PointFunction.sphere_semigroup and \
                self._sphere_ok(m)
        return False

    def _sphere_ok(self, m) -> bool:
        return True

    def heat_flow(self, m, tau, y):
        """(value, grad, hess) of H_tau phi at y, with H_tau = exp(tau * Laplacian / 2)."""
        if not self.supports_heat_flow(m):
            raise CapabilityError(f"{self.name}: no closed-form heat flow on {m.label}")
        if m.kind == "euclidean":
            return self.semigroup(tau, y)
        return self.sphere_semigroup(m, tau, y)


def _zonal_flow(coef, r, tau, c, y):
    """Heat flow of the zonal function sum_l coef_l P_l(<c, y>/r^2) on the 2-sphere of radius r."""
    ell = np.arange(len(coef))
    decayed = coef * np.exp(-0.5 * ell * (ell + 1) * float(tau) / r ** 2)
    y = np.asarray(y, dtype=float)
    x = np.clip(np.sum(y * c, axis=-1) / r ** 2, -1.0, 1.0)
    d1 = legendre.legder(decayed)
    d2 = legendre.legder(decayed, 2)
    val = legendre.legval(x, decayed)
    p1 = legendre.legval(x, d1)
    p2 = legendre.legval(x, d2)
    gx = (c - x[..., None] * y) / r ** 2           # gradient of x, tangent at y
    grad = p1[..., None] * gx
    dim = y.shape[-1]
    hess = (p2[..., None, None] * gx[..., :, None] * gx[..., None, :]
            - (p1 * x / r ** 2)[..., None, None] * np.eye(dim))
    return val, grad, hess


@dataclass
class Linear(PointFunction):
    """y -> <a, y> in the ambient coordinates (a degree-1 harmonic on spheres)."""
    a: np.ndarray
    name: str = "linear"

    def value(self, m, y):
        return np.sum(np.asarray(y) * self.a, axis=-1)

    def grad(self, m, y):
        return _amb(m, y, self.a)

    def semigroup(self, tau, y):
        y = np.asarray(y, dtype=float)
        a = np.asarray(self.a, dtype=float)
        n = a.shape[-1]
        return (np.sum(y * a, axis=-1), np.broadcast_to(a, y.shape).copy(),
                np.zeros(y.shape[:-1] + (n, n)))

    def sphere_semigroup(self, m, tau, y):
        # restrictions of linear maps are Laplace eigenfunctions with eigenvalue -n/r^2
        y = np.asarray(y, dtype=float)
        r2 = m.radius ** 2
        decay = np.exp(-0.5 * m.n * float(tau) / r2)
        val = decay * np.sum(y * self.a, axis=-1)
        grad = decay * geo.project_tangent(m, y, np.broadcast_to(self.a, y.shape))
        hess = -(val / r2)[..., None, None] * np.eye(y.shape[-1])
        return val, grad, hess


@dataclass
class Quadratic(PointFunction):
    """y -> |y - c|^2 (euclidean)."""
    center: np.ndarray
    name: str = "quadratic"

    def value(self, m, y):
        d = np.asarray(y) - self.center
        return np.sum(d * d, axis=-1)

    def grad(self, m, y):
        if m.kind != "euclidean":
            raise CapabilityError("quadratic test function is euclidean only")
        return 2.0 * (np.asarray(y) - self.center)

    def semigroup(self, tau, y):
        d = np.asarray(y, dtype=float) - self.center
        n = d.shape[-1]
        tau = np.asarray(tau, dtype=float)
        return (np.sum(d * d, axis=-1) + n * tau, 2.0 * d,
                np.broadcast_to(2.0 * np.eye(n), d.shape[:-1] + (n, n)).copy())


@dataclass
class ExpLinear(PointFunction):
    """y -> exp(scale * <a, y>) (euclidean)."""
    a: np.ndarray
    scale: float = 0.5
    name: str = "exp_linear"

    def value(self, m, y):
        return np.exp(self.scale * np.sum(np.asarray(y) * self.a, axis=-1))

    def grad(self, m, y):
        if m.kind != "euclidean":
            raise CapabilityError("exponential test function is euclidean only")
        return (self.scale * self.value(m, y))[..., None] * self.a

    def semigroup(self, tau, y):
        y = np.asarray(y, dtype=float)
        a = np.asarray(self.a, dtype=float)
        tau = np.asarray(tau, dtype=float)
        s = self.scale
        val = np.exp(s * np.sum(y * a, axis=-1) + 0.5 * s * s * np.dot(a, a) * tau)
        return (val, (s * val)[..., None] * a,
                (s * s * val)[..., None, None] * np.outer(a, a))


@dataclass
class SqrtOnePlus(PointFunction):
    """y -> sqrt(1 + eps * g(y)) for a nonnegative point function g (so F^2 = 1 + eps g)."""
    base: PointFunction
    eps: float = 1e-2
    name: str = "sqrt_one_plus"

    def value(self, m, y):
        return np.sqrt(1.0 + self.eps * self.base.value(m, y))

    def grad(self, m, y):
        return (0.5 * self.eps / self.value(m, y))[..., None] * self.base.grad(m, y)


@dataclass
class GaussianBump(PointFunction):
    """y -> exp(-d(center, y)^2 / (2 sigma^2))."""
    center: np.ndarray
    sigma: float = 0.5
    name: str = "bump"

    def value(self, m, y):
        d = geo.distance(m, y, np.broadcast_to(self.center, np.shape(y)))
        return np.exp(-0.5 * d * d / self.sigma ** 2)

    def grad(self, m, y):
        y = np.asarray(y, dtype=float)
        lg = geo.log_map(m, y, np.broadcast_to(self.center, y.shape))
        val = np.exp(-0.5 * geo.metric_eval(m, y, lg, lg) / self.sigma ** 2)
        return (val / self.sigma ** 2)[..., None] * lg

    def semigroup(self, tau, y):
        y = np.asarray(y, dtype=float)
        n = y.shape[-1]
        tau = np.asarray(tau, dtype=float)[..., None]
        var = self.sigma ** 2 + tau
        d = y - self.center
        val = (self.sigma ** 2 / var[..., 0]) ** (n / 2) * np.exp(-0.5 * np.sum(d * d, -1) / var[..., 0])
        g = -(d / var) * val[..., None]
        hess = (d[..., :, None] * d[..., None, :] / var[..., None] ** 2
                - np.eye(n) / var[..., None]) * val[..., None, None]
        return val, g, hess

    def _sphere_ok(self, m) -> bool:
        return m.n == 2

    def _legendre_coefficients(self, r, degree=64, nodes=256):
        key = (float(r), degree)
        cache = self.__dict__.setdefault("_coef_cache", {})
        if key not in cache:
            x, w = legendre.leggauss(nodes)
            f = np.exp(-0.5 * (r * np.arccos(x)) ** 2 / self.sigma ** 2)
            basis = legendre.legvander(x, degree)
            cache[key] = (2 * np.arange(degree + 1) + 1) / 2.0 * (basis.T @ (w * f))
        return cache[key]

    def sphere_semigroup(self, m, tau, y):
        coef = self._legendre_coefficients(m.radius)
        return _zonal_flow(coef, m.radius, tau, np.asarray(self.center, dtype=float), y)


def _smooth_cutoff(d, r_in, r_out):
    """C-infinity cutoff: 1 for d <= r_in, 0 for d >= r_out; returns (chi, chi')."""
    d = np.asarray(d, dtype=float)
    u = np.clip((r_out - d) / (r_out - r_in), 0.0, 1.0)

    def bump(x):
        xs = np.where(x > 0, x, 1.0)
        return np.where(x > 0, np.exp(-1.0 / xs), 0.0)

    def dbump(x):
        xs = np.where(x > 0, x, 1.0)
        return np.where(x > 0, np.exp(-1.0 / xs) / xs ** 2, 0.0)

    a, b = bump(u), bump(1.0 - u)
    chi = a / (a + b)
    dchi_du = (dbump(u) * b + a * dbump(1.0 - u)) / (a + b) ** 2
    inside = (u > 0) & (u < 1)
    dchi = np.where(inside, dchi_du * (-1.0 / (r_out - r_in)), 0.0)
    return chi, dchi


@dataclass
class NormalLinear(PointFunction):
    """Linear function in normal coordinates around ``base`` with a smooth cutoff.

    f(y) = <v, log_base(y)> * chi(d(base, y)); it has gradient v and vanishing
    Hessian at the base point.  On chart manifolds the normal coordinates are
    taken to second order, z = dy + 1/2 Gamma(base)(dy, dy), which still gives
    gradient v and zero Hessian at the base point.
    """
    base: np.ndarray
    v: np.ndarray
    r_in: float = 1.0
    r_out: float = 2.0
    name: str = "normal_linear"

    # -- helpers on the model spaces
    def _lin_and_dist(self, m, y):
        y = np.asarray(y, dtype=float)
        x = np.broadcast_to(self.base, y.shape)
        r = m.radius
        if m.kind == "euclidean":
            lin = np.sum((y - x) * self.v, axis=-1)
            glin = np.broadcast_to(np.asarray(self.v, dtype=float), y.shape)
            d = np.sqrt(np.sum((y - x) ** 2, axis=-1))
            gd = np.where(d[..., None] > 0, (y - x) / np.where(d > 0, d, 1.0)[..., None], 0.0)
            return lin, glin, d, gd
        if m.kind in ("sphere", "hyperbolic"):
            vy = geo.metric_eval(m, y, self.v, y)     # <v, y> in the ambient metric
            lg = geo.log_map(m, y, x)                # points back to base
            d = geo.norm(m, y, lg)
            theta = d / r
            gd = np.where(d[..., None] > 0, -lg / np.where(d > 0, d, 1.0)[..., None], 0.0)
            if m.kind == "sphere":
                s = np.sin(theta)
                psi = np.where(theta > 1e-6, theta / np.where(theta > 1e-6, s, 1.0), 1.0 + theta ** 2 / 6)
                dpsi = np.where(theta > 1e-4,
                                (s - theta * np.cos(theta)) / np.where(theta > 1e-4, s, 1.0) ** 2,
                                theta / 3 + 7 * theta ** 3 / 90)
            else:
                s = np.sinh(theta)
                psi = np.where(theta > 1e-6, theta / np.where(theta > 1e-6, s, 1.0), 1.0 - theta ** 2 / 6)
                dpsi = np.where(theta > 1e-4,
                                (s - theta * np.cosh(theta)) / np.where(theta > 1e-4, s, 1.0) ** 2,
                                -theta / 3 + 7 * theta ** 3 / 90)
            lin = psi * vy
            # gradient of y -> <v, y> restricted to M is the tangent projection of v
            gvy = geo.project_tangent(m, y, np.broadcast_to(self.v, y.shape))
            glin = psi[..., None] * gvy + (dpsi * vy / r)[..., None] * gd
            return lin, glin, d, gd
        # chart: second-order normal coordinates
        gx = geo.metric_matrix(m, self.base)
        gam = geo.christoffel(m, self.base)
        dy = y - x
        z = dy + 0.5 * np.einsum("kij,...i,...j->...k", gam, dy, dy)
        jac = np.eye(m.n) + np.einsum("kij,...j->...ki", gam, dy)   # dz^k / dy^i
        vlow = gx @ self.v
        lin = z @ vlow
        d = np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", z, gx, z), 0.0))
        gy = geo.metric_matrix(m, y)
        ginv = np.linalg.inv(gy)
        dlin = np.einsum("k,...ki->...i", vlow, jac)
        glin = np.einsum("...ij,...j->...i", ginv, dlin)
        zlow = z @ gx
        dd = np.einsum("...k,...ki->...i", zlow, jac) / np.where(d > 0, d, 1.0)[..., None]
        gd = np.where(d[..., None] > 0, np.einsum("...ij,...j->...i", ginv, dd), 0.0)
        return lin, glin, d, gd

    def value(self, m, y):
        lin, _, d, _ = self._lin_and_dist(m, y)
        chi, _ = _smooth_cutoff(d, self.r_in, self.r_out)
        return lin * chi

    def grad(self, m, y):
        lin, glin, d, gd = self._lin_and_dist(m, y)
        chi, dchi = _smooth_cutoff(d, self.r_in, self.r_out)
        return chi[..., None] * glin + (lin * dchi)[..., None] * gd


# ---------------------------------------------------------------------------
# cylinder functions

@dataclass(frozen=True)
class CylinderFunction:
    """F(gamma) = const + sum_j c_j phi_j(gamma(t_{slot_j}))     (mode 'sum')
    or F(gamma) = const * prod_j phi_j(gamma(t_{slot_j}))        (mode 'product').
    """
    times: tuple
    terms: tuple            # (coef, PointFunction, slot)
    mode: str = "sum"
    const: float = 0.0
    name: str = "F"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if len(t) == 0 or np.any(np.diff(t) <= 0) or t[0] < 0:
            raise ConfigurationError("partition times must be finite, nonnegative and increasing")
        for _, _, slot in self.terms:
            if not 0 <= slot < len(t):
                raise ConfigurationError("term refers to a missing slot")
        if self.mode not in ("sum", "product"):
            raise ConfigurationError("mode must be 'sum' or 'product'")

    @property
    def N(self) -> int:
        return len(self.times)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def value(self, m, pts: Sequence[np.ndarray]) -> np.ndarray:
        if self.mode == "sum":
            out = self.const + 0.0 * pts[0][..., 0]
            for c, phi, slot in self.terms:
                out = out + c * phi.value(m, pts[slot])
            return out
        out = self.const + 0.0 * pts[0][..., 0]
        for c, phi, slot in self.terms:
            out = out * c * phi.value(m, pts[slot])
        return out

    def grads(self, m, pts: Sequence[np.ndarray]) -> list:
        """Slot gradients (tangent vectors at the slot points)."""
        out = [np.zeros_like(np.asarray(p, dtype=float)) for p in pts]
        if self.mode == "sum":
            for c, phi, slot in self.terms:
                out[slot] = out[slot] + c * phi.grad(m, pts[slot])
            return out
        vals = [c * phi.value(m, pts[slot]) for c, phi, slot in self.terms]
        for j, (c, phi, slot) in enumerate(self.terms):
            others = self.const + 0.0 * vals[0]
            for i, v in enumerate(vals):
                if i != j:
                    others = others * v
            out[slot] = out[slot] + (others * c)[..., None] * phi.grad(m, pts[slot])
        return out

    def closed_form_on(self, m) -> bool:
        """True if every term has a closed-form heat flow on m (one slot, sum mode)."""
        return (self.mode == "sum" and self.N == 1
                and all(phi.supports_heat_flow(m) for _, phi, _ in self.terms))

    def squared(self) -> Optional["CylinderFunction"]:
        """F^2 as a cylinder function when it has the same closed-form structure, else None.

        Covers one-point functions c * exp(scale <a, y>) and constants.
        """
        if self.N != 1 or len(self.terms) > 1:
            return None
        if not self.terms:
            return CylinderFunction(self.times, (), const=self.const ** 2, name=f"{self.name}^2")
        c, phi, slot = self.terms[0]
        if self.mode == "product":
            c, const = c * self.const, 0.0
        else:
            const = self.const
        if const != 0.0 or not isinstance(phi, ExpLinear):
            return None
        sq = ExpLinear(np.asarray(phi.a, dtype=float), 2.0 * phi.scale, name=f"{phi.name}^2")
        return CylinderFunction(self.times, ((c * c, sq, slot),), name=f"{self.name}^2")

    def heat_flow(self, m, tau, y):
        if not self.closed_form_on(m):
            raise CapabilityError(f"{self.name} has no closed-form heat flow on {m.label}")
        y = np.asarray(y, dtype=float)
        dim = y.shape[-1]
        val = self.const + np.zeros(y.shape[:-1])
        g = np.zeros(y.shape)
        h = np.zeros(y.shape[:-1] + (dim, dim))
        for c, phi, _ in self.terms:
            a, b, d = phi.heat_flow(m, tau, y)
            val, g, h = val + c * a, g + c * b, h + c * d
        return val, g, h


def one_point(phi: PointFunction, t: float, name: str = None) -> CylinderFunction:
    return CylinderFunction((float(t),), ((1.0, phi, 0),), name=name or f"{phi.name}@{t:g}")


def constant(c: float, t: float = 1.0) -> CylinderFunction:
    return CylinderFunction((float(t),), (), const=float(c), name=f"const{c:g}")


def combination(terms, name: str = "combination") -> CylinderFunction:
    """sum of c * phi(gamma(t)) for (c, phi, t) in terms."""
    times = sorted({float(t) for _, _, t in terms})
    slots = {t: i for i, t in enumerate(times)}
    return CylinderFunction(tuple(times), tuple((float(c), phi, slots[float(t)]) for c, phi, t in terms),
                            name=name)


def product(phi1, t1, phi2, t2, name: str = "product") -> CylinderFunction:
    times = sorted({float(t1), float(t2)})
    slots = {t: i for i, t in enumerate(times)}
    return CylinderFunction(tuple(times), ((1.0, phi1, slots[float(t1)]), (1.0, phi2, slots[float(t2)])),
                            mode="product", const=1.0, name=name)


def two_point_ricci(m, v, eps: float, base=None, r_in=1.0, r_out=2.0) -> CylinderFunction:
    """f2(y, z) = 2 f1(y) - f1(z) evaluated at (gamma(0), gamma(eps))."""
    base = geo.base_point(m) if base is None else np.asarray(base, dtype=float)
    f1 = NormalLinear(base, np.asarray(v, dtype=float), r_in, r_out)
    return combination([(2.0, f1, 0.0), (-1.0, f1, eps)], name=f"two_point@{eps:g}")


def one_point_ricci(m, v, eps: float, base=None, r_in=1.0, r_out=2.0) -> CylinderFunction:
    base = geo.base_point(m) if base is None else np.asarray(base, dtype=float)
    f1 = NormalLinear(base, np.asarray(v, dtype=float), r_in, r_out)
    return one_point(f1, eps, name=f"one_point@{eps:g}")


# ---------------------------------------------------------------------------
# terminal (pathwise) quantities

def _slot_points(F, ens: PathEnsemble):
    pts, frs = [], []
    for t in F.times:
        p, u = ens.at(t)
        pts.append(p)
        frs.append(u)
    return pts, frs


def slot_gradients(F: CylinderFunction, ens: PathEnsemble) -> np.ndarray:
    """Frame components of every slot gradient, shape (P, N, n)."""
    m = ens.model
    pts, frs = _slot_points(F, ens)
    grads = F.grads(m, pts)
    return np.stack([geo.frame_components(m, p, u, g) for p, u, g in zip(pts, frs, grads)], axis=-2)


def gradient_from_slots(times, slot_grads: np.ndarray, s: float) -> np.ndarray:
    """sum over t_a >= s of the slot gradients (last two axes: slot, component)."""
    mask = np.asarray(times) >= s - TIME_TOL
    return np.sum(slot_grads[..., mask, :], axis=-2)


def eval(F: CylinderFunction, path) -> np.ndarray:
    """F evaluated on a FramedPath (scalar) or PathEnsemble (per path)."""
    ens = as_ensemble(path)
    pts, _ = _slot_points(F, ens)
    out = F.value(ens.model, pts)
    return out[0] if isinstance(path, FramedPath) else out


def parallel_gradient(F: CylinderFunction, path, s: float) -> np.ndarray:
    """Parallel gradient at time s in initial-frame coordinates."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    ens = as_ensemble(path)
    out = gradient_from_slots(F.times, slot_gradients(F, ens), s)
    return out[0] if isinstance(path, FramedPath) else out


def interval_weights(times, lo: float, hi: float, weight_integral) -> np.ndarray:
    """Integral of a weight over (t_{a-1}, t_a] cap [lo, hi] for each slot a (t_0 = 0)."""
    times = np.asarray(times, dtype=float)
    left = np.concatenate([[0.0], times[:-1]])
    a = np.clip(left, lo, hi)
    b = np.clip(times, lo, hi)
    return np.where(b > a, weight_integral(a, b), 0.0)


def piecewise_integral(times, slot_grads, lo, hi, power=2, weight_integral=None) -> np.ndarray:
    """int_lo^hi w(r) |grad_r F|^power dr, exact for the piecewise-constant integrand."""
    if weight_integral is None:
        weight_integral = lambda a, b: b - a
    w = interval_weights(times, lo, hi, weight_integral)
    total = 0.0
    for a, wa in enumerate(w):
        if wa == 0:
            continue
        g = np.sum(slot_grads[..., a:, :], axis=-2)
        total = total + wa * np.sqrt(np.sum(g * g, axis=-1)) ** power
    return total + np.zeros(slot_grads.shape[:-2])


def malliavin_norm_sq(F: CylinderFunction, path) -> np.ndarray:
    """int_0^inf |grad_s F|^2 ds as an exact sum over partition intervals."""
    ens = as_ensemble(path)
    out = piecewise_integral(F.times, slot_gradients(F, ens), 0.0, F.T, power=2)
    return out[0] if isinstance(path, FramedPath) else out


def as_ensemble(path) -> PathEnsemble:
    if isinstance(path, PathEnsemble):
        return path
    inc = None if path.increments is None else path.increments[None]
    return PathEnsemble(path.model, path.grid, path.record, path.points[None], path.frames[None],
                        inc, np.array([path.path_id]))


# ---------------------------------------------------------------------------
# conditional snapshots

@dataclass
class Snapshot:
    """Conditional information at grid time t for every path of an ensemble.

    values:     (P, B) F evaluated on B continuations (B = 1 when exact)
    slot_grads: (P, B, N, n) frame components of slot gradients on each continuation
    cd_grads:   (P, B, n) derivative in the current point (future slots only)
    hess:       (P, n, n) second parallel gradient d_i (grad_s F_t)_k, if computed
    """
    t: float
    times: np.ndarray
    values: np.ndarray
    slot_grads: np.ndarray
    cd_grads: np.ndarray
    exact: bool = False
    hess: Optional[np.ndarray] = None
    hess_s: Optional[float] = None
    flags: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return self.values.shape[1]

    def _halves(self, arr):
        if self.exact or self.B < 2:
            return arr, arr
        h = self.B // 2
        return arr[:, :h], arr[:, h:2 * h]

    def value(self) -> np.ndarray:
        return self.values.mean(axis=1)

    def value_se(self) -> np.ndarray:
        if self.exact or self.B < 2:
            return np.zeros(self.values.shape[0])
        return self.values.std(axis=1, ddof=1) / np.sqrt(self.B)

    def value_halves(self):
        a, b = self._halves(self.values)
        return a.mean(axis=1), b.mean(axis=1)

    def _past_mask(self, s):
        return (self.times >= s - TIME_TOL) & (self.times <= self.t + TIME_TOL)

    def grad(self, s: float, part=None, right_limit=False) -> np.ndarray:
        """grad_s F_t, shape (P, n).  part in {None, 0, 1} selects a half sample.

        right_limit excludes a partition time equal to s (value just after s).
        """
        mask = self._past_mask(s)
        if right_limit:
            mask &= self.times > s + TIME_TOL
        sg, cd = self.slot_grads, self.cd_grads
        if part is not None:
            sg = self._halves(sg)[part]
            cd = self._halves(cd)[part]
        return np.sum(sg[:, :, mask, :].mean(axis=1), axis=-2) + cd.mean(axis=1)

    def grad_samples(self, s: float) -> np.ndarray:
        """Per-continuation contributions whose mean is grad_s F_t, shape (P, B, n)."""
        mask = self._past_mask(s)
        return np.sum(self.slot_grads[:, :, mask, :], axis=-2) + self.cd_grads

    def grad_sq_unbiased(self, s: float, right_limit=False) -> np.ndarray:
        """Unbiased estimate of |grad_s F_t|^2 from the product of two half samples."""
        a = self.grad(s, 0, right_limit)
        b = self.grad(s, 1, right_limit)
        return np.sum(a * b, axis=-1)

    def terminal_grad(self, r: float) -> np.ndarray:
        """grad_r F on each continuation, shape (P, B, n)."""
        return gradient_from_slots(self.times, self.slot_grads, r)


def closed_form_snapshot(F: CylinderFunction, ens: PathEnsemble, t: float) -> Snapshot:
    """Exact snapshot for one-point functions with a registered heat flow."""
    m = ens.model
    if not F.closed_form_on(m):
        raise CapabilityError("closed-form snapshots need a one-point function with a "
                              f"registered heat flow on {m.label}")
    X, U = ens.at(t)
    P, n = len(ens), m.n
    tau = max(F.T - t, 0.0)
    val, g, h = F.heat_flow(m, tau, X)
    gf = geo.frame_components(m, X, U, g)
    hf = np.swapaxes(U, -1, -2) @ h @ U
    sg = np.zeros((P, 1, 1, n))
    cd = np.zeros((P, 1, n))
    if t >= F.T - TIME_TOL:
        sg[:, 0, 0] = gf
    else:
        cd[:, 0] = gf
    return Snapshot(t, np.asarray(F.times, dtype=float), val[:, None], sg, cd, True, hf)


def _inner_noise(rng: RngStream, path_ids, k: int, B: int, tail: TimeGrid, n: int) -> np.ndarray:
    sq = np.sqrt(tail.steps)[:, None]
    out = np.empty((len(path_ids), B, tail.K, n))
    for i, pid in enumerate(path_ids):
        out[i] = rng.child(int(pid), int(k)).normals((B, tail.K, n)) * sq
    return out


def _frame_offsets(n: int, delta: float) -> np.ndarray:
    offs = [np.zeros(n)]
    for i in range(n):
        e = np.zeros(n)
        e[i] = delta
        offs += [e, -e]
    return np.array(offs)


def nested_snapshot(F: CylinderFunction, ens: PathEnsemble, t: float, inner_budget: int,
                    fd_step: float, rng: RngStream, hessian_s: Optional[float] = None,
                    max_block: int = 8_000_000) -> Snapshot:
    """Snapshot at t by nested Monte Carlo with coupled central differences.

    If ``hessian_s`` is given, the second parallel gradient of grad_s F_t is
    also estimated by nested coupled differences (costly: (2n)(2n+1) extra
    continuation families per path).
    """
    m = ens.model
    n = m.n
    times = np.asarray(F.times, dtype=float)
    past = times <= t + TIME_TOL
    P = len(ens)
    pts_past, frs_past = [], []
    for ta in times[past]:
        p, u = ens.at(ta)
        pts_past.append(p)
        frs_past.append(u)
    if past.all():
        vals = F.value(m, pts_past)
        grads = F.grads(m, pts_past)
        sg = np.stack([geo.frame_components(m, p, u, g)
                       for p, u, g in zip(pts_past, frs_past, grads)], axis=-2)
        hess = np.zeros((P, n, n)) if hessian_s is not None else None
        return Snapshot(t, times, vals[:, None], sg[:, None], np.zeros((P, 1, n)), True,
                        hess, hessian_s)
    if inner_budget < 2:
        raise ConfigurationError("inner budget must be at least 2")
    k = ens.grid.index(t)
    tail = ens.grid.tail(t)
    fut_times = times[~past] - ens.grid.times[k]
    fut_idx = [tail.index(ft) for ft in fut_times]
    X, U = ens.at(t)
    offs = _frame_offsets(n, fd_step)
    O = len(offs)
    if hessian_s is not None:
        # level-1 offsets +-delta e_i, each followed by level-2 offsets {0, +-delta e_j}
        l1p, l1u = offset_starts(m, X, U, offs[1:])
        l2p, l2u = offset_starts(m, l1p, l1u, offs)
        starts = np.concatenate([offset_starts(m, X, U, offs)[0],
                                 l2p.reshape(P, -1, m.dim)], axis=1)
        sframes = np.concatenate([offset_starts(m, X, U, offs)[1],
                                  l2u.reshape(P, -1, m.dim, n)], axis=1)
    else:
        starts, sframes = offset_starts(m, X, U, offs)
    O_tot = starts.shape[1]
    B = inner_budget
    per_path = B * tail.K * n + O_tot * B * m.dim * (n + 1) * (len(fut_idx) + 3)
    block = max(1, min(P, max_block // per_path))
    values = np.empty((P, B))
    slot_grads = np.empty((P, B, len(times), n))
    cd = np.empty((P, B, n))
    hess = np.empty((P, n, n)) if hessian_s is not None else None
    flags = []
    for a in range(0, P, block):
        sl = slice(a, min(a + block, P))
        Pb = sl.stop - sl.start
        noise = _inner_noise(rng, ens.path_ids[sl], k, B, tail, n)
        pts, frs, ok = walk(m, starts[sl][:, :, None], sframes[sl][:, :, None],
                            noise[:, None], record=fut_idx)
        if not np.all(ok):
            flags.append("domain_exit")
        # assemble slot points for every (path, offset, continuation)
        full = []
        it_f = 0
        it_p = 0
        for is_past in past:
            if is_past:
                full.append(np.broadcast_to(pts_past[it_p][sl][:, None, None, :], (Pb, O_tot, B, m.dim)))
                it_p += 1
            else:
                full.append(pts[:, :, :, it_f, :])
                it_f += 1
        vals = F.value(m, full)                              # (Pb, O_tot, B)
        values[sl] = vals[:, 0]
        d = (vals[:, 1:O:2] - vals[:, 2:O:2]) / (2 * fd_step)  # (Pb, n, B)
        cd[sl] = np.moveaxis(d, 1, 2)
        center = [f[:, 0] for f in full]
        grads = F.grads(m, center)
        comps = []
        it_f = it_p = 0
        for j, is_past in enumerate(past):
            if is_past:
                u = np.broadcast_to(frs_past[it_p][sl][:, None], (Pb, B, m.dim, n))
                it_p += 1
            else:
                u = frs[:, 0, :, it_f]
                it_f += 1
            comps.append(geo.frame_components(m, center[j], u, grads[j]))
        slot_grads[sl] = np.stack(comps, axis=-2)
        if hessian_s is not None:
            lvl = vals[:, O:].reshape(Pb, 2 * n, O, B)
            mask = (times >= hessian_s - TIME_TOL) & past
            # grad_s F_t at each level-1 state
            g1 = np.empty((Pb, 2 * n, n))
            for q in range(2 * n):
                cdq = (lvl[:, q, 1:O:2] - lvl[:, q, 2:O:2]) / (2 * fd_step)  # (Pb, n, B)
                g1[:, q] = cdq.mean(axis=-1)
            if mask.any():
                # past-slot contributions at the perturbed states (future points change)
                l2pts = pts[:, O:].reshape(Pb, 2 * n, O, B, len(fut_idx), m.dim)[:, :, 0]
                l2frs = frs[:, O:].reshape(Pb, 2 * n, O, B, len(fut_idx), m.dim, n)[:, :, 0]
                for q in range(2 * n):
                    pq, it_f, it_p = [], 0, 0
                    for is_past in past:
                        if is_past:
                            pq.append(np.broadcast_to(pts_past[it_p][sl][:, None], (Pb, B, m.dim)))
                            it_p += 1
                        else:
                            pq.append(l2pts[:, q, :, it_f])
                            it_f += 1
                    gq = F.grads(m, pq)
                    it_p = 0
                    for j, is_past in enumerate(past):
                        if not is_past:
                            continue
                        if mask[j]:
                            u = np.broadcast_to(frs_past[it_p][sl][:, None], (Pb, B, m.dim, n))
                            g1[:, q] += geo.frame_components(m, pq[j], u, gq[j]).mean(axis=1)
                        it_p += 1
            hess[sl] = np.stack([(g1[:, 2 * i] - g1[:, 2 * i + 1]) / (2 * fd_step)
                                 for i in range(n)], axis=-1)
    return Snapshot(t, times, values, slot_grads, cd, False, hess, hessian_s, flags)


def snapshot(F: CylinderFunction, ens: PathEnsemble, t: float, inner_budget: int = 2048,
             fd_step: float = 1e-3, rng: RngStream = None, method: str = "auto",
             hessian_s: Optional[float] = None) -> Snapshot:
    """Closed form when registered (and method allows), nested Monte Carlo otherwise."""
    if method in ("auto", "closed_form") and F.closed_form_on(ens.model):
        return closed_form_snapshot(F, ens, t)
    if method == "closed_form":
        raise CapabilityError("no closed form registered for this function/manifold")
    if rng is None:
        raise ConfigurationError("nested estimates need an RngStream")
    return nested_snapshot(F, ens, t, inner_budget, fd_step, rng, hessian_s)


# ---------------------------------------------------------------------------
# single-path conveniences

def conditional_value(F: CylinderFunction, path: FramedPath, t: float, inner_budget: int = 2048,
                      rng: RngStream = None, method: str = "auto"):
    """(estimate, standard error) of F_t on one path."""
    snap = snapshot(F, as_ensemble(path), t, inner_budget, 1e-3, rng, method)
    if snap.B < 16 and not snap.exact:
        warnings.warn("inner budget is small; conditional value is imprecise")
    return float(snap.value()[0]), float(snap.value_se()[0])


def conditional_parallel_gradient(F: CylinderFunction, path: FramedPath, s: float, t: float,
                                  inner_budget: int = 2048, fd_step: float = 1e-3,
                                  rng: RngStream = None, method: str = "auto",
                                  check_bias: bool = False):
    """(estimate, standard error) of grad_s F_t in initial-frame coordinates.

    With ``check_bias`` the estimate is repeated with half the step; if the two
    differ by more than three standard errors a warning carries both values.
    """
    if s > t + TIME_TOL:
        raise ValueError("need s <= t")
    ens = as_ensemble(path)
    snap = snapshot(F, ens, t, inner_budget, fd_step, rng, method)
    est = snap.grad(s)[0]
    if snap.exact:
        se = np.zeros_like(est)
    else:
        se = snap.grad_samples(s)[0].std(axis=0, ddof=1) / np.sqrt(snap.B)
    if check_bias and not snap.exact:
        half = snapshot(F, ens, t, inner_budget, fd_step / 2, rng, method).grad(s)[0]
        if np.any(np.abs(half - est) > 3 * se + 1e-12):
            warnings.warn(f"finite-difference bias check failed: step {fd_step} -> {est}, "
                          f"step {fd_step / 2} -> {half}")
    return est, se


def second_parallel_gradient(F: CylinderFunction, path: FramedPath, s: float, t: float,
                             method: str = "closed_form", inner_budget: int = 512,
                             fd_step: float = 1e-2, rng: RngStream = None,
                             precision_floor: float = None) -> np.ndarray:
    """Second parallel gradient d_i (grad_s F_t)_k as an (n, n) matrix."""
    ens = as_ensemble(path)
    if method == "closed_form":
        snap = closed_form_snapshot(F, ens, t)
        if s > t + TIME_TOL:
            return np.zeros((ens.model.n, ens.model.n))
        return snap.hess[0]
    if method != "nested_fd":
        raise ValueError("method must be 'closed_form' or 'nested_fd'")
    snap = nested_snapshot(F, ens, t, inner_budget, fd_step, rng, hessian_s=s)
    if precision_floor is not None:
        noise = np.max(np.abs(snap.cd_grads[0].std(axis=0))) / np.sqrt(snap.B) / fd_step
        if noise > precision_floor:
            raise CapabilityError("nested second differences are below the precision floor; "
                                  "use the euclidean closed form")
    return snap.hess[0]


def parallel_laplacian(hess: np.ndarray) -> np.ndarray:
    return np.trace(hess, axis1=-2, axis2=-1)


# ---------------------------------------------------------------------------
# base-point derivative of E_x[F]

def base_point_gradient(F: CylinderFunction, m, start: geo.FramePoint, grid: TimeGrid,
                        seed: int, path_ids, fd_step: float = 1e-3, tag="path"):
    """Per-path coupled central differences of F under geodesic perturbation of the
    start point (same Wiener streams), plus the unperturbed slot gradients.

    Returns (cd (P, n), values (P,), slot_grads (P, N, n)); the mean of cd is
    an estimate of grad_x E_x[F] in frame coordinates.
    """
    from .pathsim import draw_increments
    n = m.n
    path_ids = np.asarray(path_ids)
    offs = _frame_offsets(n, fd_step)
    starts, frames = offset_starts(m, start.point, start.frame, offs)      # (O, dim)
    inc = draw_increments(seed, path_ids, grid, n, tag)                     # (P, K, n)
    rec = [grid.index(t) for t in F.times]
    pts, frs, ok = walk(m, starts[None, :], frames[None, :], inc[:, None], record=rec)
    slot_pts = [pts[:, :, j] for j in range(len(rec))]
    vals = F.value(m, slot_pts)                                             # (P, O)
    cd = np.stack([(vals[:, 2 * i + 1] - vals[:, 2 * i + 2]) / (2 * fd_step) for i in range(n)], -1)
    center = [p[:, 0] for p in slot_pts]
    grads = F.grads(m, center)
    sg = np.stack([geo.frame_components(m, center[j], frs[:, 0, j], grads[j])
                   for j in range(len(rec))], axis=-2)
    return cd, vals[:, 0], sg, ok
