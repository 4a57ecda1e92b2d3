"""Monte Carlo verification of path-space gradient estimates under Ricci bounds.

A ``Study`` fixes a manifold, a cylinder function, a time grid and a set of
check times.  ``collect`` simulates the outer paths (in chunks, optionally in
worker processes) and attaches conditional snapshots at every check time.
The check functions turn the collected data into ``EstimateReport`` objects:

* submartingale families (C1-C5) via the one-sided pairwise test of
  :mod:`pathlab.martingale`;
* conditional gradient bounds (G1, G2) on a fixed family of path prefixes;
* unconditional estimates (R2-R7) and Hessian estimates (H1-H3);
* the evolution identities (parallel gradient, Bochner drift);
* Ricci recovery from small-time expansions with Richardson extrapolation.

Inequalities fail only when the slack is negative beyond its confidence bound
and the discretization margin c * sqrt(h) * RMS; identities fail when the
deviation exceeds both.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import cylinder as cyl
from . import geometry as geo
from . import stats
from .cylinder import CapabilityError, CylinderFunction, Snapshot, TIME_TOL
from .martingale import submartingale_test
from .pathsim import (ConfigurationError, PathEnsemble, RngStream, TimeGrid, chunk_ids,
                      parallel_map, sample_paths)

KAPPA_PAD = 1.05


# ---------------------------------------------------------------------------
# configuration and report types

@dataclass(frozen=True)
class Budgets:
    outer_paths: int = 1000
    inner_paths: int = 64
    fd_step: float = 1e-3
    chunk_size: int = 100
    prefixes: int = 8
    prefix_inner: int = 2048
    root_inner: int = 20000
    base_paths: int = 10000
    workers: int = 1
    level: float = 0.99
    margin_constant: float = stats.MARGIN_CONSTANT

    def validate(self) -> "Budgets":
        for name in ("outer_paths", "inner_paths", "chunk_size", "prefixes", "prefix_inner",
                     "root_inner", "base_paths", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"budget '{name}' must be positive")
        if self.inner_paths < 2 or self.prefix_inner < 2 or self.root_inner < 2:
            raise ConfigurationError("inner budgets must be at least 2")
        if not 0 < self.fd_step < 1:
            raise ConfigurationError("budget 'fd_step' must lie in (0, 1)")
        if not 0.5 < self.level < 1:
            raise ConfigurationError("budget 'level' must lie in (0.5, 1)")
        return self


def _f(x):
    if isinstance(x, (list, tuple)):
        return [_f(v) for v in x]
    if isinstance(x, dict):
        return {k: _f(v) for k, v in x.items()}
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return _f(x.tolist())
    return x


@dataclass
class EstimateReport:
    tag: str
    manifold: str
    function: str
    kappa: float
    lhs: float
    lhs_ci: tuple
    rhs: float
    rhs_ci: tuple
    slack: float
    slack_ci: tuple
    margin: float
    verdict: str
    n_paths: int
    inner_budget: int
    params: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    runtime: float = 0.0

    @property
    def key(self) -> str:
        extra = ",".join(f"{k}={self.params[k]}" for k in sorted(self.params))
        return f"{self.tag}|{self.manifold}|{self.function}|kappa={self.kappa:g}|{extra}"

    def to_dict(self, include_runtime: bool = False) -> dict:
        out = {"key": self.key, "tag": self.tag, "manifold": self.manifold,
               "function": self.function, "kappa": self.kappa, "lhs": self.lhs,
               "lhs_ci": self.lhs_ci, "rhs": self.rhs, "rhs_ci": self.rhs_ci,
               "slack": self.slack, "slack_ci": self.slack_ci, "margin": self.margin,
               "verdict": self.verdict, "n_paths": self.n_paths,
               "inner_budget": self.inner_budget, "params": self.params,
               "details": self.details, "flags": list(self.flags)}
        if include_runtime:
            out["runtime"] = self.runtime
        return _f(out)


def _ci(mean, se, z):
    return (float(mean - z * se), float(mean + z * se))


def _exp_weight(origin: float, kappa: float, factor: float):
    """a, b -> int_a^b factor * exp(kappa (r - origin) / 2) dr."""
    def w(a, b):
        if kappa == 0:
            return factor * (b - a)
        return factor * 2.0 / kappa * (np.exp(0.5 * kappa * (b - origin))
                                       - np.exp(0.5 * kappa * (a - origin)))
    return w


def _cosh_weight(origin: float, kappa: float):
    def w(a, b):
        if kappa == 0:
            return b - a
        return 2.0 / kappa * (np.sinh(0.5 * kappa * (b - origin)) - np.sinh(0.5 * kappa * (a - origin)))
    return w


@dataclass(frozen=True)
class TwistedOUForm:
    """Per-path integrand of the twisted Ornstein-Uhlenbeck quadratic form:

    int_{t0}^{t1} cosh(kappa (s - t0) / 2) |grad_s F|^2 ds
      + (1 - exp(-kappa (t1 - t0))) / 2 * int_{t1}^inf exp(kappa (s - t1) / 2) |grad_s F|^2 ds
    """
    t0: float
    t1: float
    kappa: float

    def __call__(self, times, slot_grads) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        k = self.kappa
        near = cyl.piecewise_integral(times, slot_grads, self.t0, self.t1, 2,
                                      _cosh_weight(self.t0, k))
        coef = 0.5 * (1.0 - np.exp(-k * (self.t1 - self.t0)))
        if coef == 0:
            return near
        far = cyl.piecewise_integral(times, slot_grads, self.t1, times[-1], 2,
                                     _exp_weight(self.t1, k, 1.0))
        return near + coef * far


# ---------------------------------------------------------------------------
# studies

@dataclass(frozen=True)
class Study:
    model: geo.ManifoldModel
    F: CylinderFunction
    grid: TimeGrid
    check_times: tuple
    budgets: Budgets = Budgets()
    seed: int = 0
    start: Optional[geo.FramePoint] = None
    tag: str = "study"
    method: str = "auto"

    @property
    def origin(self) -> geo.FramePoint:
        return self.start if self.start is not None else geo.start_framepoint(self.model)

    @property
    def closed_form(self) -> bool:
        return self.method != "nested" and self.F.closed_form_on(self.model)


def make_study(m: geo.ManifoldModel, F: CylinderFunction, h: float = 1e-3, check_times=None,
               n_checks: int = 5, budgets: Budgets = Budgets(), seed: int = 0, start=None,
               tag: str = "study", method: str = "auto", dense_limit: int = 101) -> Study:
    """Study on the uniform grid of step h up to F.T (partition times snapped in).

    Default check times: up to ``dense_limit`` equally spaced grid times for
    closed-form functions, ``n_checks`` otherwise; partition times are always added.
    """
    grid = TimeGrid.uniform(F.T, h, include=F.times)
    if check_times is None:
        closed = method != "nested" and F.closed_form_on(m)
        count = dense_limit if closed else n_checks
        count = min(count, grid.K + 1)
        idx = np.unique(np.round(np.linspace(0, grid.K, count)).astype(int))
        check_times = grid.times[idx]
    ct = np.unique(np.concatenate([np.asarray(check_times, dtype=float), [0.0],
                                   np.asarray(F.times, dtype=float)]))
    ct = np.array([grid.times[grid.index(t)] for t in ct if t <= F.T + TIME_TOL])
    return Study(m, F, grid, tuple(float(t) for t in np.unique(ct)), budgets.validate(), int(seed),
                 start, tag, method)


def _record_indices(study: Study) -> np.ndarray:
    g = study.grid
    ts = set(study.check_times) | {float(t) for t in study.F.times}
    return np.unique([g.index(t) for t in ts])


def _inner_rng(study: Study, what: str) -> RngStream:
    return RngStream(study.seed, (what, study.tag))


def _snapshot_method(study: Study) -> str:
    return "closed_form" if study.closed_form else "nested"


def _chunk_job(job):
    study, ids = job
    b = study.budgets
    ens = sample_paths(study.model, study.origin, study.grid, study.seed, ids,
                       record=_record_indices(study), keep_increments=False, tag=study.tag)
    rng = _inner_rng(study, "inner")
    snaps = {}
    for t in study.check_times:
        if t == 0.0 and not study.closed_form:
            continue                        # shared root snapshot, computed once
        if study.closed_form:
            snaps[t] = cyl.closed_form_snapshot(study.F, ens, t)
        else:
            snaps[t] = cyl.nested_snapshot(study.F, ens, t, b.inner_paths, b.fd_step, rng)
    return ens, snaps


def _concat_ens(parts) -> PathEnsemble:
    e0 = parts[0]
    return PathEnsemble(e0.model, e0.grid, e0.record,
                        np.concatenate([e.points for e in parts]),
                        np.concatenate([e.frames for e in parts]), None,
                        np.concatenate([e.path_ids for e in parts]),
                        np.concatenate([e.valid for e in parts]))


def _concat_snaps(parts) -> Snapshot:
    s0 = parts[0]
    hess = None if s0.hess is None else np.concatenate([s.hess for s in parts])
    flags = sorted({f for s in parts for f in s.flags})
    return Snapshot(s0.t, s0.times, np.concatenate([s.values for s in parts]),
                    np.concatenate([s.slot_grads for s in parts]),
                    np.concatenate([s.cd_grads for s in parts]), s0.exact, hess, s0.hess_s, flags)


@dataclass
class StudyData:
    """Outer paths with snapshots at the check times (root snapshot shared at t = 0)."""
    study: Study
    ens: PathEnsemble
    snaps: dict
    runtime: float = 0.0

    @property
    def P(self) -> int:
        return len(self.ens)

    @property
    def times(self) -> np.ndarray:
        return np.array(self.study.check_times)

    def _b(self, x):
        x = np.asarray(x)
        return np.broadcast_to(x, (self.P,) + x.shape[1:])

    def is_shared(self, t) -> bool:
        return self.snaps[t].values.shape[0] == 1 and self.P > 1

    def grad(self, t, s, right_limit=False):
        return self._b(self.snaps[t].grad(s, right_limit=right_limit))

    def grad_norm(self, t, s, right_limit=False):
        g = self.snaps[t].grad(s, right_limit=right_limit)
        return self._b(np.sqrt(np.sum(g * g, axis=-1)))

    def grad_sq(self, t, s, right_limit=False):
        return self._b(self.snaps[t].grad_sq_unbiased(s, right_limit))

    def grad_sq_var(self, t, s) -> float:
        """Variance of the shared root estimate of |grad_s F_t|^2 (0 for per-path snapshots)."""
        snap = self.snaps[t]
        if not self.is_shared(t) or snap.exact:
            return 0.0
        g = snap.grad(s)[0]
        cov = np.atleast_2d(np.cov(snap.grad_samples(s)[0].T))
        return float(4.0 * g @ cov @ g / snap.B)

    def grad_norm_var(self, t, s) -> float:
        snap = self.snaps[t]
        if not self.is_shared(t) or snap.exact:
            return 0.0
        g = snap.grad(s)[0]
        nrm = max(np.linalg.norm(g), 1e-300)
        cov = np.atleast_2d(np.cov(snap.grad_samples(s)[0].T))
        return float(g @ cov @ g / nrm ** 2 / snap.B)

    def value_halves(self, t):
        a, b = self.snaps[t].value_halves()
        return self._b(a), self._b(b)

    def value_var(self, t) -> float:
        snap = self.snaps[t]
        if not self.is_shared(t) or snap.exact:
            return 0.0
        return float(snap.value_se()[0] ** 2)

    def hess(self, t):
        h = self.snaps[t].hess
        if h is None:
            raise CapabilityError("no second parallel gradient available at this check time")
        return self._b(h)

    def ricci(self, t):
        """Ricci tensor in frame components along the outer paths at time t."""
        X, U = self.ens.at(t)
        return geo.ricci_frame(self.study.model, X, U)

    def ricci_pair(self, t, s, right_limit=False):
        """Unbiased Ric(grad_s F_t, grad_t F_t) from independent half samples."""
        snap = self.snaps[t]
        a = self._b(snap.grad(s, 0))
        b = self._b(snap.grad(t, 1, right_limit))
        return np.einsum("pi,pij,pj->p", a, self.ricci(t), b)

    def ricci_vector(self, t, right_limit=False):
        return np.einsum("pij,pj->pi", self.ricci(t), self.grad(t, t, right_limit))

    def terminal_slot_grads(self) -> np.ndarray:
        return cyl.slot_gradients(self.study.F, self.ens)

    def terminal_values(self) -> np.ndarray:
        return cyl.eval(self.study.F, self.ens)


def collect(study: Study) -> StudyData:
    """Simulate outer paths chunk by chunk and attach snapshots at every check time."""
    t0 = time.perf_counter()
    b = study.budgets
    jobs = [(study, ids) for ids in chunk_ids(b.outer_paths, b.chunk_size)]
    parts = parallel_map(_chunk_job, jobs, b.workers)
    ens = _concat_ens([p[0] for p in parts])
    snaps = {t: _concat_snaps([p[1][t] for p in parts]) for t in parts[0][1]}
    if 0.0 in study.check_times and 0.0 not in snaps:
        root = ens.subset(np.arange(1))
        snaps[0.0] = cyl.nested_snapshot(study.F, root, 0.0, b.root_inner, b.fd_step,
                                         _inner_rng(study, "root"))
    return StudyData(study, ens, snaps, time.perf_counter() - t0)


def auto_kappa(m: geo.ManifoldModel, points=None, frames=None) -> float:
    """Two-sided Ricci bound |Ric| <= kappa from sampled points, padded by 5%."""
    if points is None:
        fp = geo.start_framepoint(m)
        points, frames = fp.point[None], fp.frame[None]
    R = geo.ricci_frame(m, points, frames)
    return float(KAPPA_PAD * np.max(np.abs(np.linalg.eigvalsh(R))))


# ---------------------------------------------------------------------------
# helpers shared by the checks

def _times_from(data: StudyData, s: float) -> np.ndarray:
    ts = data.times
    if not np.any(np.abs(ts - s) < TIME_TOL):
        raise ConfigurationError(f"s = {s} is not a check time")
    return ts[ts >= s - TIME_TOL]


def _cumulative_trapezoid(times, left, right) -> np.ndarray:
    """Running trapezoid integral; ``left[:, j]`` is the value just after tau_j and
    ``right[:, j]`` the value just before tau_j (they differ at partition times)."""
    dt = np.diff(times)
    inc = 0.5 * dt * (left[:, :-1] + right[:, 1:])
    return np.concatenate([np.zeros((left.shape[0], 1)), np.cumsum(inc, axis=1)], axis=1)


def _report(tag, data_or_study, kappa, lhs, lhs_se, rhs, rhs_se, slack, slack_se, marg, z,
            verdict, n_paths, inner, params=None, details=None, flags=(), runtime=0.0,
            function=None, manifold=None) -> EstimateReport:
    if isinstance(data_or_study, StudyData):
        study = data_or_study.study
    else:
        study = data_or_study
    return EstimateReport(
        tag=tag, manifold=manifold or study.model.label, function=function or study.F.name,
        kappa=float(kappa), lhs=float(lhs), lhs_ci=_ci(lhs, lhs_se, z), rhs=float(rhs),
        rhs_ci=_ci(rhs, rhs_se, z), slack=float(slack), slack_ci=_ci(slack, slack_se, z),
        margin=float(marg), verdict=verdict, n_paths=int(n_paths), inner_budget=int(inner),
        params=_f(dict(params or {})), details=_f(dict(details or {})), flags=list(flags),
        runtime=float(runtime))


def _inner_budget(data: StudyData) -> int:
    return 1 if data.study.closed_form else data.study.budgets.inner_paths


def _inconclusive(tag, data: StudyData, kappa, reason: str, params=None) -> EstimateReport:
    nan = float("nan")
    return _report(tag, data, kappa, nan, 0.0, nan, 0.0, nan, 0.0, 0.0, 0.0,
                   stats.INCONCLUSIVE, data.P, _inner_budget(data), params,
                   {"reason": reason}, [reason])


def _paired_inequality(tag, data, kappa, lhs_i, rhs_i, params, h, extra_var=0.0, details=None,
                       flags=(), slack_i=None, lhs_value=None):
    """Report for E[rhs_i] >= E[lhs_i] from paired per-path samples."""
    b = data.study.budgets
    z = stats.z_value(b.level)
    slack_i = rhs_i - lhs_i if slack_i is None else slack_i
    lm, ls = stats.mean_se(lhs_i)
    rm, rs = stats.mean_se(rhs_i)
    sm, ss = stats.mean_se(slack_i)
    ss = float(np.sqrt(ss ** 2 + extra_var))
    if lhs_value is not None:
        lm = lhs_value
    marg = stats.margin(h, stats.rms(slack_i - sm) + abs(sm), b.margin_constant)
    verdict = stats.inequality_verdict(sm, ss, marg + 1e-12, z)
    return _report(tag, data, kappa, lm, ls, rm, rs, sm, ss, marg, z, verdict, len(slack_i),
                   _inner_budget(data), params, details, flags)


# ---------------------------------------------------------------------------
# submartingale families C1-C5

C_VARIANTS = ("C1", "C2", "C3", "C4", "C5")


def _c_process(data: StudyData, variant: str, kappa: float, s: float, times):
    P, J = data.P, len(times)
    A2 = np.stack([data.grad_sq(t, s) for t in times], axis=1)
    A = np.stack([data.grad_norm(t, s) for t in times], axis=1)
    Bl = np.stack([data.grad_norm(t, t) for t in times], axis=1)
    Br = np.stack([data.grad_norm(t, t, right_limit=True) for t in times], axis=1)
    if variant in ("C4", "C5"):
        Y = A + 0.5 * kappa * _cumulative_trapezoid(times, Br, Bl)
        cvar = [data.grad_norm_var(t, s) for t in times]
        return Y, cvar
    Y = A2 + kappa * _cumulative_trapezoid(times, A * Br, A * Bl)
    if variant in ("C1", "C2"):
        H = np.stack([data.hess(t) for t in times], axis=1)
        if variant == "C1":
            q = np.sum(H * H, axis=(-1, -2))
        else:
            q = np.trace(H, axis1=-2, axis2=-1) ** 2 / data.study.model.n
        Y = Y - _cumulative_trapezoid(times, q, q)
    cvar = [data.grad_sq_var(t, s) for t in times]
    return Y, cvar


def _conditional_increments(data: StudyData, variant: str, kappa: float, s: float, times):
    """Increments Z_T - Z_{t1} on fresh continuations of fixed prefixes (closed form only)."""
    study = data.study
    b = study.budgets
    mid = times[len(times) // 2]
    if mid >= study.F.T - TIME_TOL or not study.closed_form:
        return []
    m = study.model
    Fs = CylinderFunction(tuple(t - mid for t in study.F.times), study.F.terms, study.F.mode,
                          study.F.const, study.F.name)
    tail_times = [t - mid for t in times if t >= mid - TIME_TOL]
    grid = TimeGrid.uniform(study.F.T - mid, study.grid.h, include=tail_times)
    X, U = data.ens.at(mid)
    out = []
    for i in range(min(b.prefixes, data.P)):
        start = geo.FramePoint(X[i], U[i])
        ens = sample_paths(m, start, grid, study.seed, np.arange(b.prefix_inner),
                           record=[grid.index(t) for t in tail_times], keep_increments=False,
                           tag=f"{study.tag}/cond/{i}")
        snaps = {t: cyl.closed_form_snapshot(Fs, ens, t) for t in tail_times}
        sub = StudyData(replace(study, F=Fs), ens, snaps)
        ss = max(s - mid, 0.0)
        tt = np.array(tail_times)
        if variant in ("C4", "C5"):
            A = np.stack([sub.grad_norm(t, ss) for t in tt], axis=1)
            Bl = np.stack([sub.grad_norm(t, t) for t in tt], axis=1)
            Br = np.stack([sub.grad_norm(t, t, right_limit=True) for t in tt], axis=1)
            Z = A + 0.5 * kappa * _cumulative_trapezoid(tt, Br, Bl)
            base = data.grad_norm(mid, s)[i]
        else:
            A2 = np.stack([sub.grad_sq(t, ss) for t in tt], axis=1)
            A = np.stack([sub.grad_norm(t, ss) for t in tt], axis=1)
            Bl = np.stack([sub.grad_norm(t, t) for t in tt], axis=1)
            Br = np.stack([sub.grad_norm(t, t, right_limit=True) for t in tt], axis=1)
            Z = A2 + kappa * _cumulative_trapezoid(tt, A * Br, A * Bl)
            if variant in ("C1", "C2"):
                H = np.stack([sub.hess(t) for t in tt], axis=1)
                q = (np.sum(H * H, axis=(-1, -2)) if variant == "C1"
                     else np.trace(H, axis1=-2, axis2=-1) ** 2 / m.n)
                Z = Z - _cumulative_trapezoid(tt, q, q)
            base = data.grad_sq(mid, s)[i]
        out.append((f"prefix{i}@{mid:g}", Z[:, -1] - base))
    return out


def check_C(data: StudyData, variant: str, kappa: float, s: float = 0.0,
            conditional: bool = False) -> EstimateReport:
    """Submartingale property of the compensated |grad_s F_t|^2 (C1-C3) or |grad_s F_t| (C4, C5).

    C4 tests consecutive check-time increments, C5 all pairs (plus, with
    ``conditional``, increments on fresh continuations of fixed prefixes).
    """
    t0 = time.perf_counter()
    if variant not in C_VARIANTS:
        raise ValueError(f"unknown variant {variant}")
    params = {"s": s}
    try:
        times = _times_from(data, s)
        Y, cvar = _c_process(data, variant, kappa, s, times)
    except CapabilityError as exc:
        return _inconclusive(variant, data, kappa, str(exc), params)
    extra, flags = [], []
    if conditional and variant == "C5":
        extra = _conditional_increments(data, variant, kappa, s, times)
        if not extra:
            flags.append("conditional variant needs a closed form and an interior check time")
    b = data.study.budgets
    res = submartingale_test(Y, times, data.study.grid.h, b.level,
                             "consecutive" if variant == "C4" else "all", extra, cvar,
                             b.margin_constant, name=variant)
    j, k = res.details["worst_index"] if res.details["worst_index"] else (0, len(times) - 1)
    z = res.details["z"]
    se = (res.ci[1] - res.estimate) / z if z > 0 else 0.0
    lhs, rhs = float(np.mean(Y[:, j])), float(np.mean(Y[:, k]))
    rep = _report(variant, data, kappa, lhs, stats.mean_se(Y[:, j])[1], rhs,
                  stats.mean_se(Y[:, k])[1], res.estimate, se, res.margin, z, res.verdict,
                  data.P, _inner_budget(data), params,
                  {"worst_pair": res.details["worst_pair"], "tests": res.details["tests"],
                   "check_times": list(times), "mean_process": list(Y.mean(axis=0))},
                  flags + sorted({f for t in times for f in data.snaps[t].flags}))
    rep.runtime = time.perf_counter() - t0 + data.runtime
    return rep


# ---------------------------------------------------------------------------
# conditional bounds G1, G2 on fixed prefixes

def check_G(data: StudyData, variant: str, kappa: float, s: float = 0.0,
            t: float = None) -> EstimateReport:
    """|grad_s F_t| (G1) or its square (G2) against the conditional expectation of the
    terminal weighted integrals, on ``budgets.prefixes`` fixed outer paths."""
    t0 = time.perf_counter()
    study = data.study
    b = study.budgets
    F = study.F
    if t is None:
        t = float(data.times[np.argmin(np.abs(data.times - F.T / 2))])
    params = {"s": s, "t": t}
    if s > t + TIME_TOL:
        raise ConfigurationError("need s <= t")
    k = min(b.prefixes, data.P)
    sub = data.ens.subset(np.arange(k))
    snap = cyl.nested_snapshot(F, sub, t, b.prefix_inner, b.fd_step, _inner_rng(study, "prefix"))
    times = np.asarray(F.times, dtype=float)
    T = F.T
    sg = snap.slot_grads                                   # (k, B, N, n)
    term = cyl.gradient_from_slots(times, sg, s)            # (k, B, n)
    gs = snap.grad_samples(s)                               # (k, B, n)
    ghat = gs.mean(axis=1)
    z = stats.z_value(b.level, tests=k)
    rows = []
    for i in range(k):
        if variant == "G1":
            tail = cyl.piecewise_integral(times, sg[i], t, T, 1, _exp_weight(t, kappa, 0.5 * kappa))
            rhs_b = np.linalg.norm(term[i], axis=-1) + tail
            nrm = np.linalg.norm(ghat[i])
            lhs = nrm
            lin = gs[i] @ (ghat[i] / nrm) if nrm > 0 else np.zeros(snap.B)
        elif variant == "G2":
            tail = cyl.piecewise_integral(times, sg[i], t, T, 2, _exp_weight(t, kappa, 0.5 * kappa))
            rhs_b = np.exp(0.5 * kappa * (T - t)) * (np.sum(term[i] ** 2, axis=-1) + tail)
            a, c = snap.grad(s, 0)[i], snap.grad(s, 1)[i]
            lhs = float(a @ c)
            lin = 2.0 * gs[i] @ ghat[i]
        else:
            raise ValueError(f"unknown variant {variant}")
        slack_b = rhs_b - lin
        _, se = stats.mean_se(slack_b) if not snap.exact else (0.0, 0.0)
        slack = float(np.mean(rhs_b) - lhs)
        marg = stats.margin(study.grid.h, stats.rms(slack_b - slack_b.mean()) + abs(slack),
                            b.margin_constant)
        # the future-slot part of the gradient comes from central differences
        fd_marg = b.fd_step ** 2 * stats.rms(snap.cd_grads[i])
        marg += fd_marg * (1.0 if variant == "G1" else 2.0 * float(np.linalg.norm(ghat[i])))
        rows.append((slack, float(se), marg, lhs, float(np.mean(rhs_b)),
                     float(stats.mean_se(rhs_b)[1])))
    verdicts = [stats.inequality_verdict(sl, se, mg + 1e-12, z) for sl, se, mg, *_ in rows]
    scores = [(sl + mg) / se if se > 0 else (np.inf if sl + mg >= -1e-12 else -np.inf)
              for sl, se, mg, *_ in rows]
    w = int(np.argmin(scores))
    sl, se, mg, lhs, rhs, rse = rows[w]
    rep = _report(variant, data, kappa, lhs, se, rhs, rse, sl, se, mg, z, stats.worst(verdicts),
                  k, b.prefix_inner, params,
                  {"worst_prefix": w, "prefix_slack": [r[0] for r in rows],
                   "prefix_se": [r[1] for r in rows]}, list(snap.flags))
    rep.runtime = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# unconditional estimates R2-R7

def _base_job(job):
    study, ids = job
    grid = TimeGrid.uniform(study.F.T, study.grid.h, include=study.F.times)
    return cyl.base_point_gradient(study.F, study.model, study.origin, grid, study.seed, ids,
                                   study.budgets.fd_step, tag=f"{study.tag}/base")


def base_point_samples(study: Study):
    """(cd, values, slot_grads, ok) for ``budgets.base_paths`` coupled paths."""
    b = study.budgets
    jobs = [(study, ids) for ids in chunk_ids(b.base_paths, max(b.chunk_size, 1000))]
    parts = parallel_map(_base_job, jobs, b.workers)
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))


def check_R_base(study: Study, variant: str, kappa: float, samples=None) -> EstimateReport:
    """R2 / R3: derivative of x -> E_x F at the start point against path-space integrals."""
    t0 = time.perf_counter()
    b = study.budgets
    cd, _, sg, ok = samples if samples is not None else base_point_samples(study)
    ok = np.asarray(ok).reshape(len(cd), -1).all(axis=1)
    cd, sg = cd[ok], sg[ok]
    N = len(cd)
    times = np.asarray(study.F.times, dtype=float)
    T = study.F.T
    g = cd.mean(axis=0)
    cov = np.atleast_2d(np.cov(cd.T))
    g0 = cyl.gradient_from_slots(times, sg, 0.0)
    if variant == "R2":
        nrm = np.linalg.norm(g)
        lhs = nrm
        lhs_i = cd @ (g / nrm) if nrm > 0 else np.zeros(N)
        rhs_i = np.linalg.norm(g0, axis=-1) + cyl.piecewise_integral(
            times, sg, 0.0, T, 1, _exp_weight(0.0, kappa, 0.5 * kappa))
    elif variant == "R3":
        lhs = float(g @ g - np.trace(cov) / N)
        lhs_i = 2.0 * cd @ g
        rhs_i = np.exp(0.5 * kappa * T) * (np.sum(g0 ** 2, axis=-1) + cyl.piecewise_integral(
            times, sg, 0.0, T, 2, _exp_weight(0.0, kappa, 0.5 * kappa)))
    else:
        raise ValueError(f"unknown variant {variant}")
    z = stats.z_value(b.level)
    slack_i = rhs_i - lhs_i
    _, ss = stats.mean_se(slack_i)
    rm, rs = stats.mean_se(rhs_i)
    slack = rm - lhs
    marg = stats.margin(study.grid.h, stats.rms(slack_i - slack_i.mean()) + abs(slack),
                        b.margin_constant)
    # central differences carry an O(fd_step^2) truncation error
    fd_marg = b.fd_step ** 2 * stats.rms(cd)
    marg += fd_marg * (1.0 if variant == "R2" else 2.0 * float(np.linalg.norm(g)))
    flags = [] if ok.all() else [f"{int((~ok).sum())} paths left the chart domain"]
    rep = _report(variant, study, kappa, lhs, stats.mean_se(lhs_i)[1], rm, rs, slack, ss, marg, z,
                  stats.inequality_verdict(slack, ss, marg + 1e-12, z), N, 1, {},
                  {"base_gradient": list(g)}, flags)
    rep.runtime = time.perf_counter() - t0
    return rep


def check_R_time(data: StudyData, variant: str, kappa: float, t: float = None) -> EstimateReport:
    """R4 / R5: E|grad_t F_t| (or its square) against terminal weighted integrals from t."""
    study = data.study
    T = study.F.T
    if t is None:
        t = float(data.times[np.argmin(np.abs(data.times - T / 2))])
    times = np.asarray(study.F.times, dtype=float)
    sg = data.terminal_slot_grads()
    gt = cyl.gradient_from_slots(times, sg, t)
    if variant == "R4":
        lhs_i = data.grad_norm(t, t)
        rhs_i = np.linalg.norm(gt, axis=-1) + cyl.piecewise_integral(
            times, sg, t, T, 1, _exp_weight(t, kappa, 0.5 * kappa))
        var0 = data.grad_norm_var(t, t)
    elif variant == "R5":
        lhs_i = data.grad_sq(t, t)
        rhs_i = np.exp(0.5 * kappa * (T - t)) * (np.sum(gt ** 2, axis=-1) + cyl.piecewise_integral(
            times, sg, t, T, 2, _exp_weight(t, kappa, 0.5 * kappa)))
        var0 = data.grad_sq_var(t, t)
    else:
        raise ValueError(f"unknown variant {variant}")
    return _paired_inequality(variant, data, kappa, lhs_i, rhs_i, {"t": t}, study.grid.h, var0)


def check_R6(data: StudyData, kappa: float, t0: float = 0.0, t1: float = None) -> EstimateReport:
    """E|F_{t1} - F_{t0}|^2 against exp(kappa (T - t0) / 2) times the twisted OU form."""
    study = data.study
    T = study.F.T
    t1 = T if t1 is None else t1
    a1, b1 = data.value_halves(t1)
    a0, b0 = data.value_halves(t0)
    lhs_i = (a1 - a0) * (b1 - b0)
    ou = TwistedOUForm(t0, t1, kappa)(study.F.times, data.terminal_slot_grads())
    rhs_i = np.exp(0.5 * kappa * (T - t0)) * ou
    dev = np.mean(a1 - a0) if data.is_shared(t0) else 0.0
    var0 = 4.0 * dev ** 2 * data.value_var(t0)
    return _paired_inequality("R6", data, kappa, lhs_i, rhs_i, {"t0": t0, "t1": t1},
                              study.grid.h, var0)


def check_R7(data: StudyData, kappa: float) -> EstimateReport:
    """Entropy growth of F^2 from 0 to T against 2 exp(kappa T / 2) times the OU form."""
    study = data.study
    T = study.F.T
    F = data.terminal_values()
    F2 = F * F
    m2 = F2.mean()
    with np.errstate(divide="ignore", invalid="ignore"):
        ent_i = np.where(F2 > 0, F2 * np.log(F2), 0.0)
    lhs = float(ent_i.mean() - m2 * np.log(m2)) if m2 > 0 else 0.0
    infl = ent_i - (np.log(m2) + 1.0) * F2 if m2 > 0 else ent_i
    ou = TwistedOUForm(0.0, T, kappa)(study.F.times, data.terminal_slot_grads())
    rhs_i = 2.0 * np.exp(0.5 * kappa * T) * ou
    return _paired_inequality("R7", data, kappa, infl, rhs_i, {"t0": 0.0, "t1": T},
                              study.grid.h, 0.0, slack_i=rhs_i - infl + (infl.mean() - lhs),
                              lhs_value=lhs)


# ---------------------------------------------------------------------------
# Hessian estimates H1-H3 (closed-form one-point functions)

def _require_closed_one_point(data: StudyData):
    if not data.study.closed_form or data.study.F.N != 1:
        raise CapabilityError("Hessian estimates need a closed-form one-point function")


def _hess_sq_integral(data: StudyData, weight, lo=0.0):
    """int_lo^T weight(t) |Hess_t|^2 dt per path (trapezoid over check times)."""
    times = data.times[data.times >= lo - TIME_TOL]
    q = np.stack([np.sum(data.hess(t) ** 2, axis=(-1, -2)) * weight(t) for t in times], axis=1)
    return _cumulative_trapezoid(times, q, q)[:, -1]


def check_H(data: StudyData, variant: str, kappa: float, s: float = 0.0,
            squared: CylinderFunction = None) -> EstimateReport:
    """H1 (at s), H2 (Poincare type) and H3 (log-Sobolev type, needs the closed form of F^2)."""
    study = data.study
    params = {"s": s} if variant == "H1" else {}
    if variant == "H3" and squared is None:
        squared = study.F.squared()
    try:
        _require_closed_one_point(data)
        if variant == "H3" and (squared is None or not squared.closed_form_on(study.model)):
            raise CapabilityError("H3 needs the closed-form heat flow of F^2")
    except CapabilityError as exc:
        return _inconclusive(variant, data, kappa, str(exc), params)
    T = study.F.T
    times = np.asarray(study.F.times, dtype=float)
    sg = data.terminal_slot_grads()
    h = study.grid.h
    if variant == "H1":
        lhs_i = data.grad_sq(s, s) + _hess_sq_integral(data, lambda t: 1.0, lo=s)
        g_s = cyl.gradient_from_slots(times, sg, s)
        rhs_i = np.exp(0.5 * kappa * (T - s)) * (np.sum(g_s ** 2, axis=-1) + cyl.piecewise_integral(
            times, sg, s, T, 2, _exp_weight(s, kappa, 0.5 * kappa)))
        return _paired_inequality("H1", data, kappa, lhs_i, rhs_i, params, h)
    cosh_int = cyl.piecewise_integral(times, sg, 0.0, T, 2, _cosh_weight(0.0, kappa))
    if variant == "H2":
        F = data.terminal_values()
        mean = F.mean()
        n = len(F)
        var_i = (F - mean) ** 2 * n / (n - 1)
        lhs_i = var_i + _hess_sq_integral(data, lambda t: t)
        rhs_i = np.exp(0.5 * kappa * T) * cosh_int
        return _paired_inequality("H2", data, kappa, lhs_i, rhs_i, params, h)
    if variant == "H3":
        F = data.terminal_values()
        F2 = F * F
        m2 = F2.mean()
        ent_i = F2 * np.log(F2)
        ent = float(ent_i.mean() - m2 * np.log(m2))
        infl = ent_i - (np.log(m2) + 1.0) * F2
        m = study.model
        qs = []
        for t in data.times:
            X, U = data.ens.at(t)
            val, g, H = squared.heat_flow(m, T - t, X)
            gf = geo.frame_components(m, X, U, g)
            Hf = np.swapaxes(U, -1, -2) @ H @ U
            L = Hf / val[:, None, None] - gf[:, :, None] * gf[:, None, :] / val[:, None, None] ** 2
            qs.append(t * val * np.sum(L * L, axis=(-1, -2)))
        q = np.stack(qs, axis=1)
        hess_term = 0.5 * _cumulative_trapezoid(data.times, q, q)[:, -1]
        lhs_i = infl + hess_term
        rhs_i = 2.0 * np.exp(0.5 * kappa * T) * cosh_int
        lhs_value = ent + hess_term.mean()
        return _paired_inequality("H3", data, kappa, lhs_i, rhs_i, params, h,
                                  slack_i=rhs_i - lhs_i + (infl.mean() - ent),
                                  lhs_value=lhs_value,
                                  details={"entropy": ent, "hessian_term": hess_term.mean()})
    raise ValueError(f"unknown variant {variant}")


# ---------------------------------------------------------------------------
# evolution identities

def _identity_report(tag, data, kappa, D, times, params, cvar=None, details=None):
    """Two-sided test that every increment D[:, j] (j >= 1, from the first check time) has mean 0."""
    b = data.study.budgets
    J = D.shape[1]
    tests = max((J - 1) * (D.shape[2] if D.ndim == 3 else 1), 1)
    z = stats.z_value(b.level, tests=tests, sided=2)
    cvar = np.zeros(J) if cvar is None else np.asarray(cvar)
    worst_row, verdicts = None, []
    for j in range(1, J):
        cols = D[:, j] if D.ndim == 3 else D[:, j][:, None]
        for c in range(cols.shape[1]):
            d = cols[:, c]
            est, se = stats.mean_se(d)
            se = float(np.sqrt(se ** 2 + cvar[0] + cvar[j]))
            marg = stats.margin(data.study.grid.h, stats.rms(d), b.margin_constant)
            verdicts.append(stats.identity_verdict(est, se, marg + 1e-12, z))
            score = abs(est) - marg
            if worst_row is None or score / max(se, 1e-300) > worst_row[0]:
                worst_row = (score / max(se, 1e-300), est, se, marg, j, c)
    _, est, se, marg, j, c = worst_row
    return est, se, marg, z, stats.worst(verdicts), {"worst_time": float(times[j]),
                                                      "worst_component": int(c), **(details or {})}


def check_pargrad_evolution(data: StudyData, s: float = 0.0) -> EstimateReport:
    """grad_s F_t - (1/2) int_s^t Ric(grad_r F_r) dr has constant mean (martingale)."""
    times = _times_from(data, s)
    G = np.stack([data.grad(t, s) for t in times], axis=1)                     # (P, J, n)
    Rl = np.stack([data.ricci_vector(t) for t in times], axis=1)
    Rr = np.stack([data.ricci_vector(t, right_limit=True) for t in times], axis=1)
    dt = np.diff(times)
    inc = 0.5 * dt[None, :, None] * (Rr[:, :-1] + Rl[:, 1:])
    comp = np.concatenate([np.zeros_like(G[:, :1]), np.cumsum(inc, axis=1)], axis=1)
    V = G - 0.5 * comp
    D = V - V[:, :1]
    est, se, marg, z, verdict, det = _identity_report("PARGRAD", data, 0.0, D, times, {"s": s})
    j = int(np.argmin(np.abs(times - det["worst_time"])))
    c = det["worst_component"]
    lhs = float(np.mean(G[:, j, c] - G[:, 0, c]))
    rhs = float(np.mean(0.5 * comp[:, j, c]))
    return _report("PARGRAD", data, 0.0, lhs, stats.mean_se(G[:, j, c] - G[:, 0, c])[1], rhs,
                   stats.mean_se(0.5 * comp[:, j, c])[1], est, se, marg, z, verdict, data.P,
                   _inner_budget(data), {"s": s}, det)


def check_bochner_drift(data: StudyData, s: float = 0.0) -> EstimateReport:
    """|grad_s F_t|^2 - int_s^t (|grad_r grad_s F_r|^2 + Ric(grad_s F_r, grad_r F_r)) dr is a
    martingale.  lhs/rhs report the average drift rate of |grad_s F_t|^2 over the whole
    window and the average compensator rate."""
    try:
        times = _times_from(data, s)
        A2 = np.stack([data.grad_sq(t, s) for t in times], axis=1)
        H = np.stack([np.sum(data.hess(t) ** 2, axis=(-1, -2)) for t in times], axis=1)
    except CapabilityError as exc:
        return _inconclusive("BOCHNER", data, 0.0, str(exc), {"s": s})
    Rl = np.stack([data.ricci_pair(t, s) for t in times], axis=1)
    Rr = np.stack([data.ricci_pair(t, s, right_limit=True) for t in times], axis=1)
    comp = _cumulative_trapezoid(times, H + Rr, H + Rl)
    Y = A2 - comp
    D = Y - Y[:, :1]
    cvar = [data.grad_sq_var(t, s) for t in times]
    est, se, marg, z, verdict, det = _identity_report("BOCHNER", data, 0.0, D, times, {"s": s},
                                                      cvar)
    span = times[-1] - times[0]
    drift = (A2[:, -1] - A2[:, 0]) / span
    crate = comp[:, -1] / span
    dm, ds = stats.mean_se(drift)
    ds = float(np.sqrt(ds ** 2 + (cvar[0] + cvar[-1]) / span ** 2))
    cm, cs = stats.mean_se(crate)
    det.update({"drift_rate": dm, "drift_rate_se": ds, "compensator_rate": cm,
                "compensator_rate_se": cs})
    return _report("BOCHNER", data, 0.0, dm, ds, cm, cs, est, se, marg, z, verdict, data.P,
                   _inner_budget(data), {"s": s}, det)


# ---------------------------------------------------------------------------
# Ricci recovery from small-time expansions

RICCI_ROUTES = ("one_point", "two_point")


@dataclass
class RicciEstimate:
    route: str
    manifold: str
    eps: list
    estimates: list
    stderr: list
    extrapolants: list
    value: float
    value_se: float
    residual: float
    exact: Optional[float]
    verdict: str
    flags: list = field(default_factory=list)
    n_paths: int = 0
    runtime: float = 0.0

    def to_report(self, tolerance: float, level: float = 0.99) -> EstimateReport:
        z = stats.z_value(level)
        exact = float("nan") if self.exact is None else self.exact
        slack = tolerance - abs(self.value - exact)
        tag = "RICCI_ONE_POINT" if self.route == "one_point" else "RICCI_TWO_POINT"
        return EstimateReport(
            tag=tag, manifold=self.manifold, function=f"ricci-{self.route}", kappa=0.0,
            lhs=self.value, lhs_ci=_ci(self.value, self.value_se, z), rhs=exact, rhs_ci=(exact, exact),
            slack=slack, slack_ci=_ci(slack, self.value_se, z), margin=tolerance,
            verdict=self.verdict, n_paths=self.n_paths, inner_budget=1,
            params={"eps": list(self.eps)},
            details=_f({"estimates": self.estimates, "stderr": self.stderr,
                        "extrapolants": self.extrapolants, "residual": self.residual}),
            flags=list(self.flags), runtime=self.runtime)


def _ricci_job(job):
    m, route, v, eps, steps, seed, ids, fd_step, r_in, r_out, base = job
    start = geo.start_framepoint(m, base)
    v_amb = start.frame @ np.asarray(v, dtype=float)
    build = cyl.one_point_ricci if route == "one_point" else cyl.two_point_ricci
    F = build(m, v_amb, eps, base=start.point, r_in=r_in, r_out=r_out)
    grid = TimeGrid.uniform(eps, eps / steps)
    cd, _, sg, ok = cyl.base_point_gradient(F, m, start, grid, seed, ids, fd_step,
                                            tag=f"ricci/{route}/{eps!r}")
    ok = np.asarray(ok).reshape(len(cd), -1).all(axis=1)
    return cd, sg.sum(axis=1), ok


def default_cutoff(m: geo.ManifoldModel) -> tuple:
    """Inner/outer cutoff radii of the normal-coordinate linear function.

    The inner radius must stay several path spreads sqrt(2 eps) away from the
    start point for every eps used; 1.5 covers eps <= 0.2.  Charts with a
    smaller domain pass their own ``cutoff``.
    """
    return 1.5, 2.5


def ricci_expansion_estimate(m: geo.ManifoldModel, route: str, eps: float, v=None,
                             n_paths: int = 100000, steps_per_eps: int = 50, seed: int = 0,
                             chunk_size: int = 10000, workers: int = 1, fd_step: float = 1e-3,
                             cutoff: tuple = None, base=None):
    """First-order coefficient at one eps: returns (estimate, stderr, n_valid).

    one_point: (E|grad_0 F_eps|^2 - |grad_x E F_eps|^2) / eps
    two_point: (|grad_x E F_eps|^2 - E|grad_0 F_eps|^2) / eps
    |grad_x E F_eps|^2 comes from coupled central differences, debiased by tr(cov)/N.
    """
    if route not in RICCI_ROUTES:
        raise ValueError(f"route must be one of {RICCI_ROUTES}")
    v = np.eye(m.n)[0] if v is None else np.asarray(v, dtype=float)
    r_in, r_out = cutoff or default_cutoff(m)
    jobs = [(m, route, v, float(eps), steps_per_eps, seed, ids, fd_step, r_in, r_out, base)
            for ids in chunk_ids(n_paths, chunk_size)]
    parts = parallel_map(_ricci_job, jobs, workers)
    cd = np.concatenate([p[0] for p in parts])
    g0 = np.concatenate([p[1] for p in parts])
    ok = np.concatenate([p[2] for p in parts])
    cd, g0 = cd[ok], g0[ok]
    N = len(cd)
    gm = cd.mean(axis=0)
    base_sq = gm @ gm - np.trace(np.atleast_2d(np.cov(cd.T))) / N
    a = np.sum(g0 * g0, axis=-1)
    sign = 1.0 if route == "one_point" else -1.0
    est = sign * (a.mean() - base_sq) / eps
    infl = sign * (a - 2.0 * cd @ gm) / eps
    return float(est), float(stats.mean_se(infl)[1]), N


def exact_ricci(m: geo.ManifoldModel, v=None, base=None) -> float:
    start = geo.start_framepoint(m, base)
    v = np.eye(m.n)[0] if v is None else np.asarray(v, dtype=float)
    R = geo.ricci_frame(m, start.point, start.frame)
    return float(v @ R @ v)


def recover_ricci(m: geo.ManifoldModel, route: str = "one_point", v=None,
                  eps_list: Sequence[float] = (0.2, 0.1, 0.05), n_paths: int = 100000,
                  steps_per_eps: int = 50, seed: int = 0, chunk_size: int = 10000,
                  workers: int = 1, fd_step: float = 1e-3, cutoff: tuple = None,
                  tolerance: float = 0.1, residual_tolerance: float = None,
                  base=None) -> RicciEstimate:
    """Ric(v, v) at the start point by Richardson extrapolation over decreasing eps.

    Extrapolant j combines eps_j and eps_{j+1}: (r e_{j+1} - e_j) / (r - 1), r = eps_j / eps_{j+1}.
    The residual is the difference of the last two extrapolants; when it exceeds
    ``residual_tolerance`` (default: ``tolerance``) plus its noise, the asymptotic
    regime is not established and the verdict is inconclusive.  Otherwise the
    verdict compares the last extrapolant with the exact Ricci curvature of the
    model (when known) using ``tolerance``.
    """
    t0 = time.perf_counter()
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigurationError("eps values must decrease")
    est, se, nv = [], [], []
    for eps in eps_list:
        e, s, n = ricci_expansion_estimate(m, route, eps, v, n_paths, steps_per_eps, seed,
                                           chunk_size, workers, fd_step, cutoff, base)
        est.append(e)
        se.append(s)
        nv.append(n)
    extra, extra_se = [], []
    for j in range(len(eps_list) - 1):
        r = eps_list[j] / eps_list[j + 1]
        extra.append((r * est[j + 1] - est[j]) / (r - 1))
        extra_se.append(float(np.hypot(r * se[j + 1], se[j]) / (r - 1)))
    if extra:
        value, value_se = extra[-1], extra_se[-1]
    else:
        value, value_se = est[-1], se[-1]
    residual = abs(extra[-1] - extra[-2]) if len(extra) >= 2 else float("nan")
    flags = []
    res_tol = tolerance if residual_tolerance is None else residual_tolerance
    z = stats.z_value(0.99, sided=2)
    try:
        exact = exact_ricci(m, v, base)
    except geo.NumericalError:
        exact = None
        flags.append("exact Ricci curvature unavailable")
    if len(extra) >= 2 and residual > res_tol + z * np.hypot(extra_se[-1], extra_se[-2]):
        flags.append("extrapolation residual exceeds tolerance; asymptotic regime not established")
        verdict = stats.INCONCLUSIVE
    elif exact is None:
        verdict = stats.INCONCLUSIVE
    else:
        verdict = stats.PASS if abs(value - exact) <= tolerance else stats.FAIL
    if min(nv) < n_paths:
        flags.append(f"{n_paths - min(nv)} paths left the chart domain")
    return RicciEstimate(route, m.label, eps_list, est, se, extra, float(value), float(value_se),
                         float(residual), exact, verdict, flags, int(n_paths),
                         time.perf_counter() - t0)


def recover_ricci_lower(m, v=None, **kw) -> RicciEstimate:
    return recover_ricci(m, "one_point", v, **kw)


def recover_ricci_two_point(m, v=None, **kw) -> RicciEstimate:
    return recover_ricci(m, "two_point", v, **kw)


# ---------------------------------------------------------------------------
# registry

CHECKS = {
    "C1": "Compensated |grad_s F_t|^2 with the full second parallel gradient is a submartingale.",
    "C2": "As C1 with the squared parallel Laplacian divided by the dimension.",
    "C3": "|grad_s F_t|^2 plus kappa times the running integral of |grad_s F_r||grad_r F_r| "
          "is a submartingale.",
    "C4": "|grad_s F_t| plus (kappa/2) int_s^t |grad_r F_r| dr has nonnegative increments "
          "between consecutive check times.",
    "C5": "The C4 process is a submartingale over all check-time pairs (optionally also "
          "conditionally on fixed path prefixes).",
    "G1": "|grad_s F_t| is bounded by the conditional mean of |grad_s F| plus an "
          "exponentially weighted integral of |grad_r F| over r >= t.",
    "G2": "Squared version of G1 with the exp(kappa (T - t) / 2) prefactor.",
    "R2": "|grad_x E F| is bounded by E of |grad_0 F| plus the weighted integral of |grad_s F|.",
    "R3": "Squared version of R2.",
    "R4": "E|grad_t F_t| against terminal integrals from t (G1 at s = t, averaged).",
    "R5": "E|grad_t F_t|^2 against terminal integrals from t (G2 at s = t, averaged).",
    "R6": "Spectral-gap type bound of E|F_t1 - F_t0|^2 by the twisted OU form.",
    "R7": "Log-Sobolev type bound of the entropy growth of F^2 by the twisted OU form.",
    "H1": "E|grad_s F_s|^2 plus the integrated second parallel gradient against "
          "terminal integrals (closed-form one-point functions).",
    "H2": "Variance plus the double integral of the second parallel gradient against the "
          "cosh-weighted integral of E|grad_s F|^2.",
    "H3": "Entropy of F^2 plus the weighted Hessian of log (F^2)_t against twice the "
          "cosh-weighted integral.",
    "PARGRAD": "grad_s F_t minus half the integrated Ricci action on grad_t F_t is a martingale.",
    "BOCHNER": "|grad_s F_t|^2 minus the integrated second-gradient and Ricci terms is a "
               "martingale; reports the drift rate against the compensator rate.",
    "RICCI_ONE_POINT": "Ric(v, v) from the one-point small-time expansion with Richardson "
                       "extrapolation.",
    "RICCI_TWO_POINT": "Ric(v, v) from the two-point small-time expansion with Richardson "
                       "extrapolation.",
}


def run_check(tag: str, data: StudyData, kappa: float, **params) -> EstimateReport:
    """Dispatch a check tag on collected study data."""
    if tag in C_VARIANTS:
        return check_C(data, tag, kappa, **params)
    if tag in ("G1", "G2"):
        return check_G(data, tag, kappa, **params)
    if tag in ("R2", "R3"):
        return check_R_base(data.study, tag, kappa, **params)
    if tag in ("R4", "R5"):
        return check_R_time(data, tag, kappa, **params)
    if tag == "R6":
        return check_R6(data, kappa, **params)
    if tag == "R7":
        return check_R7(data, kappa)
    if tag in ("H1", "H2", "H3"):
        return check_H(data, tag, kappa, **params)
    if tag == "PARGRAD":
        return check_pargrad_evolution(data, **params)
    if tag == "BOCHNER":
        return check_bochner_drift(data, **params)
    raise ConfigurationError(f"unknown check '{tag}'")
