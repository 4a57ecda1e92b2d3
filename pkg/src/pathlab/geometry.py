"""Riemannian model spaces and chart metrics.

Points and tangent vectors are numpy arrays with arbitrary leading batch
dimensions.  Model spaces use extrinsic coordinates:

* euclidean: points in R^n
* sphere: points in R^{n+1} with |p| = radius
* hyperbolic: hyperboloid sheet in Minkowski R^{1,n}, <p,p>_L = -radius^2, p_0 > 0
* chart: points in an open subset of R^n with a user supplied metric g_ij(p)

A frame is an array of shape (..., dim, n) whose columns are tangent vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FD_STEP = 1e-4          # central-difference step for curvature of chart metrics
METRIC_FD_STEP = 1e-5   # step for Christoffel symbols derived from the metric
GEODESIC_TOL = 1e-10    # local error target for chart geodesic integration
ORTHO_TOL = 1e-9


class DomainError(ValueError):
    """Point or geodesic outside the chart domain."""


class NumericalError(ArithmeticError):
    """Finite-difference estimate failed its step-halving consistency check."""


@dataclass(frozen=True)
class ManifoldModel:
    n: int
    kind: str = "euclidean"
    radius: float = 1.0
    metric_fn: Optional[Callable] = field(default=None, compare=False)
    christoffel_fn: Optional[Callable] = field(default=None, compare=False)
    domain_fn: Optional[Callable] = field(default=None, compare=False)
    name: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        if self.kind not in ("euclidean", "sphere", "hyperbolic", "chart"):
            raise ValueError(f"unknown manifold kind {self.kind!r}")
        if self.kind == "chart" and self.metric_fn is None:
            raise ValueError("chart manifolds need a metric function")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def dim(self) -> int:
        """Number of coordinates used to store a point."""
        return self.n + 1 if self.kind in ("sphere", "hyperbolic") else self.n

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind in ("sphere", "hyperbolic"):
            return f"{self.kind}{self.n}(r={self.radius:g})"
        return f"{self.kind}{self.n}"


@dataclass(frozen=True)
class FramePoint:
    point: np.ndarray
    frame: np.ndarray


def euclidean(n: int) -> ManifoldModel:
    return ManifoldModel(n, "euclidean")


def sphere(n: int, radius: float = 1.0) -> ManifoldModel:
    return ManifoldModel(n, "sphere", radius)


def hyperbolic(n: int, radius: float = 1.0) -> ManifoldModel:
    return ManifoldModel(n, "hyperbolic", radius)


def chart(n: int, metric, christoffel=None, domain=None, name: str = "") -> ManifoldModel:
    """Chart manifold from g(p) -> (..., n, n) and optional Gamma(p) -> (..., n, n, n).

    Christoffel arrays are indexed ``gamma[..., k, i, j]`` = Gamma^k_ij.
    """
    return ManifoldModel(n, "chart", 1.0, metric, christoffel, domain, name)


def conformal_chart(n: int, phi, dphi, domain=None, name: str = "") -> ManifoldModel:
    """Chart with metric exp(2 phi(p)) * delta and analytic Christoffel symbols."""
    eye = np.eye(n)

    def metric(p):
        p = np.asarray(p, dtype=float)
        return np.exp(2.0 * phi(p))[..., None, None] * eye

    def christoffel(p):
        d = dphi(np.asarray(p, dtype=float))
        # Gamma^k_ij = delta_ki d_j phi + delta_kj d_i phi - delta_ij d_k phi
        return (eye[:, :, None] * d[..., None, None, :]
                + eye[:, None, :] * d[..., None, :, None]
                - eye[None, :, :] * d[..., :, None, None])

    return chart(n, metric, christoffel, domain, name)


def stereographic_sphere_chart(n: int = 2) -> ManifoldModel:
    """Unit round sphere in stereographic coordinates (projection from the south pole)."""
    def phi(p):
        return np.log(2.0) - np.log1p(np.sum(p * p, axis=-1))

    def dphi(p):
        return -2.0 * p / (1.0 + np.sum(p * p, axis=-1))[..., None]

    return conformal_chart(n, phi, dphi, name=f"stereo-sphere{n}")


def stereographic_inverse(p: np.ndarray) -> np.ndarray:
    """Chart point -> point on the unit sphere (north pole at chart origin)."""
    p = np.asarray(p, dtype=float)
    s = np.sum(p * p, axis=-1, keepdims=True)
    return np.concatenate([2.0 * p, 1.0 - s], axis=-1) / (1.0 + s)


def stereographic_jacobian(p: np.ndarray) -> np.ndarray:
    """Differential of :func:`stereographic_inverse`, shape (..., n+1, n)."""
    p = np.asarray(p, dtype=float)
    n = p.shape[-1]
    s = np.sum(p * p, axis=-1)[..., None, None]
    top = 2.0 * np.eye(n) / (1.0 + s) - 4.0 * p[..., :, None] * p[..., None, :] / (1.0 + s) ** 2
    bottom = -4.0 * p[..., None, :] / (1.0 + s) ** 2
    return np.concatenate([top, bottom], axis=-2)


# ---------------------------------------------------------------------------
# metric

def _minkowski(a, b):
    return np.sum(a[..., 1:] * b[..., 1:], axis=-1) - a[..., 0] * b[..., 0]


def _check_domain(m: ManifoldModel, p):
    if m.domain_fn is not None and not np.all(m.domain_fn(p)):
        raise DomainError(f"point outside the domain of {m.label}")


def metric_matrix(m: ManifoldModel, p) -> np.ndarray:
    """g_ij(p) for chart manifolds, shape (..., n, n)."""
    p = np.asarray(p, dtype=float)
    _check_domain(m, p)
    return np.asarray(m.metric_fn(p), dtype=float)


def metric_eval(m: ManifoldModel, p, v, w) -> np.ndarray:
    """g_p(v, w), broadcasting over leading dimensions."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if m.kind in ("euclidean", "sphere"):
        return np.sum(v * w, axis=-1)
    if m.kind == "hyperbolic":
        return _minkowski(v, w)
    g = metric_matrix(m, p)
    return np.einsum("...i,...ij,...j->...", v, g, w)


def norm(m: ManifoldModel, p, v) -> np.ndarray:
    return np.sqrt(np.maximum(metric_eval(m, p, v, v), 0.0))


def frame_components(m: ManifoldModel, p, u, w) -> np.ndarray:
    """Coordinates of the tangent vector w in the orthonormal frame u: g(u e_i, w)."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if m.kind in ("euclidean", "sphere"):
        return (w[..., None, :] @ u)[..., 0, :]
    if m.kind == "hyperbolic":
        w2 = w.copy()
        w2[..., 0] = -w2[..., 0]
        return (w2[..., None, :] @ u)[..., 0, :]
    g = metric_matrix(m, p)
    return ((w[..., None, :] @ g) @ u)[..., 0, :]


def project_tangent(m: ManifoldModel, p, v) -> np.ndarray:
    """Orthogonal projection of an ambient vector onto T_pM."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    r2 = m.radius ** 2
    if m.kind == "sphere":
        return v - (np.sum(p * v, axis=-1) / r2)[..., None] * p
    if m.kind == "hyperbolic":
        return v + (_minkowski(p, v) / r2)[..., None] * p
    return v


def gram_schmidt(m: ManifoldModel, p, u) -> np.ndarray:
    """Orthonormalize the columns of u at p (modified Gram-Schmidt in the metric).

    For embedded models the columns are first projected onto T_pM.
    """
    u = np.array(u, dtype=float, copy=True)
    if m.kind in ("sphere", "hyperbolic"):
        for i in range(m.n):
            u[..., :, i] = project_tangent(m, p, u[..., :, i])
    for i in range(m.n):
        col = u[..., :, i]
        for j in range(i):
            prev = u[..., :, j]
            col = col - metric_eval(m, p, prev, col)[..., None] * prev
        col = col / norm(m, p, col)[..., None]
        u[..., :, i] = col
    return u


def orthonormality_error(m: ManifoldModel, p, u) -> np.ndarray:
    """max_ij |g(u e_i, u e_j) - delta_ij|."""
    u = np.asarray(u, dtype=float)
    gram = np.empty(u.shape[:-2] + (m.n, m.n))
    for i in range(m.n):
        for j in range(m.n):
            gram[..., i, j] = metric_eval(m, p, u[..., :, i], u[..., :, j])
    return np.max(np.abs(gram - np.eye(m.n)), axis=(-2, -1))


def base_point(m: ManifoldModel) -> np.ndarray:
    """Canonical start point: origin, north pole (last coordinate) or hyperboloid vertex."""
    p = np.zeros(m.dim)
    if m.kind == "sphere":
        p[-1] = m.radius
    elif m.kind == "hyperbolic":
        p[0] = m.radius
    return p


def standard_frame(m: ManifoldModel, p=None) -> np.ndarray:
    """Orthonormal frame at p obtained from the coordinate axes."""
    if p is None:
        p = base_point(m)
    p = np.asarray(p, dtype=float)
    if m.kind == "sphere":
        u = np.eye(m.dim)[:, :m.n]
    elif m.kind == "hyperbolic":
        u = np.eye(m.dim)[:, 1:]
    else:
        u = np.eye(m.n)
    u = np.broadcast_to(u, p.shape[:-1] + u.shape).copy()
    return gram_schmidt(m, p, u)


def start_framepoint(m: ManifoldModel, p=None) -> FramePoint:
    if p is None:
        p = base_point(m)
    p = np.asarray(p, dtype=float)
    return FramePoint(p, standard_frame(m, p))


# ---------------------------------------------------------------------------
# closed-form exponential and logarithm on the model spaces

def exp_map(m: ManifoldModel, p, v) -> np.ndarray:
    return geodesic_step(m, p, v, 1.0)


def log_map(m: ManifoldModel, p, q) -> np.ndarray:
    """Inverse exponential map log_p(q) on euclidean/sphere/hyperbolic models."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    r = m.radius
    if m.kind == "euclidean":
        return q - p
    if m.kind == "sphere":
        c = np.sum(p * q, axis=-1) / r ** 2
        w = q - c[..., None] * p
        sw = np.sqrt(np.sum(w * w, axis=-1))
        theta = np.arctan2(sw / r, c)
        scale = np.where(sw > 0, r * theta / np.where(sw > 0, sw, 1.0), 1.0)
        return scale[..., None] * w
    if m.kind == "hyperbolic":
        c = -_minkowski(p, q) / r ** 2
        w = q - c[..., None] * p
        sw = np.sqrt(np.maximum(_minkowski(w, w), 0.0))
        theta = np.arcsinh(sw / r)
        scale = np.where(sw > 0, r * theta / np.where(sw > 0, sw, 1.0), 1.0)
        return scale[..., None] * w
    raise NotImplementedError("log_map has no closed form on chart manifolds")


def distance(m: ManifoldModel, p, q) -> np.ndarray:
    return norm(m, p, log_map(m, p, q))


# ---------------------------------------------------------------------------
# curvature

def _christoffel(m: ManifoldModel, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if m.christoffel_fn is not None:
        return np.asarray(m.christoffel_fn(p), dtype=float)
    n = m.n
    ginv = np.linalg.inv(metric_matrix(m, p))
    dg = np.empty(p.shape[:-1] + (n, n, n))  # dg[..., l, i, j] = d_l g_ij
    for l in range(n):
        e = np.zeros(n)
        e[l] = METRIC_FD_STEP
        dg[..., l, :, :] = (m.metric_fn(p + e) - m.metric_fn(p - e)) / (2 * METRIC_FD_STEP)
    # Gamma_{l,ij} = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    lower = 0.5 * (np.einsum("...ijl->...lij", dg) + np.einsum("...jil->...lij", dg) - dg)
    return np.einsum("...kl,...lij->...kij", ginv, lower)


christoffel = _christoffel


def _ricci_matrix_chart(m: ManifoldModel, p, step: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    n = m.n
    gam = _christoffel(m, p)
    dgam = np.empty(p.shape[:-1] + (n, n, n, n))  # dgam[..., a, k, i, j] = d_a Gamma^k_ij
    for a in range(n):
        e = np.zeros(n)
        e[a] = step
        dgam[..., a, :, :, :] = (_christoffel(m, p + e) - _christoffel(m, p - e)) / (2 * step)
    # R_jk = d_i G^i_jk - d_j G^i_ik + G^i_ip G^p_jk - G^i_jp G^p_ik
    ric = (np.einsum("...iijk->...jk", dgam)
           - np.einsum("...jiik->...jk", dgam)
           + np.einsum("...iip,...pjk->...jk", gam, gam)
           - np.einsum("...ijp,...pik->...jk", gam, gam))
    return 0.5 * (ric + np.swapaxes(ric, -1, -2))


def ricci_matrix(m: ManifoldModel, p) -> np.ndarray:
    """Ricci tensor R_jk at p in chart coordinates (chart manifolds only).

    Central differences of the Christoffel symbols with step FD_STEP; the
    truncation error is O(FD_STEP^2).  A step-halving comparison guards
    against non-smooth metrics.
    """
    r1 = _ricci_matrix_chart(m, p, FD_STEP)
    r2 = _ricci_matrix_chart(m, p, FD_STEP / 2)
    scale = np.maximum(1.0, np.abs(r1))
    if not np.all(np.isfinite(r1)) or np.any(np.abs(r1 - r2) > 1e-4 * scale):
        raise NumericalError("Ricci finite differences disagree under step halving")
    return r1


def ricci_eval(m: ManifoldModel, p, v, w) -> np.ndarray:
    """Ric_p(v, w)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if m.kind == "euclidean":
        return np.zeros(np.broadcast_shapes(v.shape, w.shape)[:-1])
    if m.kind == "sphere":
        return (m.n - 1) / m.radius ** 2 * metric_eval(m, p, v, w)
    if m.kind == "hyperbolic":
        return -(m.n - 1) / m.radius ** 2 * metric_eval(m, p, v, w)
    return np.einsum("...j,...jk,...k->...", v, ricci_matrix(m, p), w)


def ricci_frame(m: ManifoldModel, p, u) -> np.ndarray:
    """Ricci tensor in frame components R_ij = Ric(u e_i, u e_j), shape (..., n, n)."""
    u = np.asarray(u, dtype=float)
    if m.kind in ("euclidean", "sphere", "hyperbolic"):
        k = {"euclidean": 0.0, "sphere": 1.0, "hyperbolic": -1.0}[m.kind]
        val = k * (m.n - 1) / m.radius ** 2
        return np.broadcast_to(val * np.eye(m.n), u.shape[:-2] + (m.n, m.n)).copy()
    return np.einsum("...ji,...jk,...kl->...il", u, ricci_matrix(m, p), u)


# ---------------------------------------------------------------------------
# geodesics and transport

def _chart_rhs(m, x, xd, u):
    gam = _christoffel(m, x)
    xdd = -np.einsum("...kij,...i,...j->...k", gam, xd, xd)
    ud = -np.einsum("...kij,...i,...jl->...kl", gam, xd, u)
    return xd, xdd, ud


def _chart_rk4(m, x, xd, u, nsub):
    dt = 1.0 / nsub
    for _ in range(nsub):
        k1 = _chart_rhs(m, x, xd, u)
        k2 = _chart_rhs(m, x + 0.5 * dt * k1[0], xd + 0.5 * dt * k1[1], u + 0.5 * dt * k1[2])
        k3 = _chart_rhs(m, x + 0.5 * dt * k2[0], xd + 0.5 * dt * k2[1], u + 0.5 * dt * k2[2])
        k4 = _chart_rhs(m, x + dt * k3[0], xd + dt * k3[1], u + dt * k3[2])
        x = x + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        xd = xd + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        u = u + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        _check_domain(m, x)
    return x, xd, u


def _chart_geodesic(m, p, disp, u=None, tol=GEODESIC_TOL, max_sub=1024):
    """Integrate the geodesic with initial velocity disp over unit time.

    The number of RK4 substeps is doubled, separately for every geodesic in a
    batch, until two successive resolutions agree to ``tol``; each result
    therefore does not depend on the rest of the batch.
    """
    p = np.asarray(p, dtype=float)
    disp = np.asarray(disp, dtype=float)
    if u is None:
        u = np.zeros(p.shape + (0,))
    u = np.asarray(u, dtype=float)
    lead = np.broadcast_shapes(p.shape[:-1], disp.shape[:-1], u.shape[:-2])
    d, k = p.shape[-1], u.shape[-1]
    M = int(np.prod(lead))
    x0 = np.broadcast_to(p, lead + (d,)).reshape(M, d)
    v0 = np.broadcast_to(disp, lead + (d,)).reshape(M, d)
    u0 = np.broadcast_to(u, lead + (d, k)).reshape(M, d, k)
    _check_domain(m, x0)
    out = [np.empty_like(x0), np.empty_like(v0), np.empty_like(u0)]
    active = np.arange(len(x0))
    nsub = 1
    prev = _chart_rk4(m, x0, v0, u0, nsub)
    while len(active):
        nsub *= 2
        cur = _chart_rk4(m, x0[active], v0[active], u0[active], nsub)
        err = np.maximum(np.max(np.abs(cur[0] - prev[0]), axis=-1),
                         np.max(np.abs(cur[2] - prev[2]), axis=(-1, -2), initial=0.0))
        done = (err < tol) | (nsub >= max_sub)
        for o, c in zip(out, cur):
            o[active[done]] = c[done]
        active = active[~done]
        prev = tuple(c[~done] for c in cur)
    return tuple(o.reshape(lead + o.shape[1:]) for o in out)


def geodesic_step(m: ManifoldModel, p, v, h=1.0) -> np.ndarray:
    """exp_p(h v)."""
    if np.any(np.asarray(h) < 0):
        raise ValueError("duration must be nonnegative")
    return transport_frame(m, p, v, h, None).point


def transport_frame(m: ManifoldModel, p, v, h, u) -> FramePoint:
    """Move along the geodesic t -> exp_p(t v), 0 <= t <= h, carrying the frame u.

    The transported frame is re-orthonormalized at the endpoint.  ``u`` may be
    None, in which case only the endpoint is computed.
    """
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    v = np.asarray(v, dtype=float)
    disp = h[..., None] * v if h.ndim else h * v
    r = m.radius
    if m.kind == "euclidean":
        q = p + disp
        return FramePoint(q, None if u is None else np.array(u, dtype=float, copy=True))
    if m.kind == "chart":
        x, _, uu = _chart_geodesic(m, p, disp, u)
        if u is None:
            return FramePoint(x, None)
        return FramePoint(x, gram_schmidt(m, x, uu))
    if m.kind == "sphere":
        theta = np.sqrt(np.sum(disp * disp, axis=-1)) / r
        c, s = np.cos(theta), np.sin(theta)
        nrm = p / r
    else:
        theta = np.sqrt(np.maximum(_minkowski(disp, disp), 0.0)) / r
        c, s = np.cosh(theta), np.sinh(theta)
        nrm = p / r
    safe = np.where(theta > 0, theta, 1.0)
    vhat = disp / (r * safe)[..., None]
    vhat = np.where((theta > 0)[..., None], vhat, 0.0)
    q = c[..., None] * p + (r * s)[..., None] * vhat
    if m.kind == "sphere":
        q = q * (r / np.sqrt(np.sum(q * q, axis=-1)))[..., None]
        vnew = -s[..., None] * nrm + c[..., None] * vhat
    else:
        q = q * (r / np.sqrt(-_minkowski(q, q)))[..., None]
        vnew = s[..., None] * nrm + c[..., None] * vhat
    if u is None:
        return FramePoint(q, None)
    u = np.asarray(u, dtype=float)
    if m.kind == "sphere":
        coef = np.einsum("...dk,...d->...k", u, vhat)
    else:
        vj = vhat.copy()
        vj[..., 0] = -vj[..., 0]
        coef = np.einsum("...dk,...d->...k", u, vj)
    unew = u + (vnew - vhat)[..., :, None] * coef[..., None, :]
    return FramePoint(q, gram_schmidt(m, q, unew))


def random_walk_step(m: ManifoldModel, p, u, dw) -> FramePoint:
    """One geodesic random walk step: move by the frame image of the increment dw."""
    disp = np.einsum("...dk,...k->...d", u, dw)
    return transport_frame(m, p, disp, 1.0, u)
