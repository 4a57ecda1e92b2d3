"""Martingale diagnostics for F_t = E_t[F] along simulated paths.

Everything here consumes a PathEnsemble plus conditional snapshots at a set of
check times (all recorded grid times by default).  Squares of noisy nested
estimates are formed from two independent half samples so that they are
unbiased; the Ito isometry uses a martingale control variate on the variance
side.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import cylinder as cyl
from . import stats
from .cylinder import CylinderFunction, Snapshot
from .pathsim import ConfigurationError, PathEnsemble, RngStream, TimeGrid


@dataclass
class ProcessSample:
    """Scalar process values on paths at check times; ``values`` is (P, J)."""
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    path_ids: np.ndarray
    label: str = "F_t"

    def write_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(["path_id", "time", "value", "stderr"])
        for i, pid in enumerate(self.path_ids):
            for j, t in enumerate(self.times):
                w.writerow([int(pid), repr(float(t)), repr(float(self.values[i, j])),
                            repr(float(self.stderr[i, j]))])


@dataclass
class MartingaleTestResult:
    name: str
    statistic: float
    estimate: float
    ci: tuple
    margin: float
    verdict: str
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "statistic": self.statistic, "estimate": self.estimate,
                "ci": list(self.ci), "margin": self.margin, "verdict": self.verdict,
                "details": self.details}


# ---------------------------------------------------------------------------
# snapshots at check times

def recorded_times(ens: PathEnsemble) -> np.ndarray:
    return ens.grid.times[ens.record]


def snapshots_at(F: CylinderFunction, ens: PathEnsemble, times: Sequence[float] = None,
                 inner_budget: int = 256, fd_step: float = 1e-3, rng: RngStream = None,
                 method: str = "auto", hessian_s: Optional[float] = None) -> dict:
    """{t: Snapshot} for each check time (closed form when available)."""
    times = recorded_times(ens) if times is None else np.asarray(times, dtype=float)
    out = {}
    for t in times:
        out[float(t)] = cyl.snapshot(F, ens, float(t), inner_budget, fd_step, rng, method,
                                     hessian_s)
    return out


def _check_times(snaps: dict) -> np.ndarray:
    return np.array(sorted(snaps))


def _noise_between(ens: PathEnsemble, times: np.ndarray) -> np.ndarray:
    """Wiener increments over consecutive check intervals, shape (P, J-1, n)."""
    if ens.increments is None:
        raise ConfigurationError("ensemble was sampled without increments")
    idx = [ens.grid.index(t) for t in times]
    csum = np.concatenate([np.zeros_like(ens.increments[:, :1]),
                           np.cumsum(ens.increments, axis=1)], axis=1)
    return np.stack([csum[:, b] - csum[:, a] for a, b in zip(idx[:-1], idx[1:])], axis=1)


def martingale_path(F: CylinderFunction, ens: PathEnsemble, snaps: dict = None,
                    **snapshot_kw) -> ProcessSample:
    """Estimates of F_t (with standard errors) at the check times on every path."""
    snaps = snaps if snaps is not None else snapshots_at(F, ens, **snapshot_kw)
    times = _check_times(snaps)
    vals = np.stack([snaps[t].value() for t in times], axis=1)
    se = np.stack([snaps[t].value_se() for t in times], axis=1)
    return ProcessSample(times, vals, se, ens.path_ids, label=F.name)


def _integrands(snaps: dict, times: np.ndarray, unbiased_square=False):
    """Left-point integrands grad_t F_t just after each check time (right limits)."""
    g = [snaps[t].grad(t, right_limit=True) for t in times[:-1]]
    if not unbiased_square:
        return np.stack(g, axis=1)
    sq = [snaps[t].grad_sq_unbiased(t, right_limit=True) for t in times[:-1]]
    return np.stack(g, axis=1), np.stack(sq, axis=1)


def _initial_value(snaps: dict, times: np.ndarray) -> float:
    # F_0 is deterministic; pool the per-path estimates
    return float(np.mean(snaps[times[0]].value()))


def _per_chunk(fn, F, ens, snaps, snapshot_kw):
    """Apply fn(F, ens, snaps) -> tuple of per-path arrays to one ensemble or a chunk list."""
    if isinstance(ens, PathEnsemble):
        snaps = snaps if snaps is not None else snapshots_at(F, ens, **snapshot_kw)
        return fn(F, ens, snaps)
    if snaps is not None:
        raise ConfigurationError("precomputed snapshots need a single ensemble")
    parts = [fn(F, e, snapshots_at(F, e, **snapshot_kw)) for e in ens]
    return tuple(np.concatenate(col) for col in zip(*parts))


def _residual_terms(F, ens, snaps):
    times = _check_times(snaps)
    if abs(times[0]) > 1e-12 or times[-1] < F.T - 1e-10:
        raise ConfigurationError("check times must start at 0 and reach the last partition time")
    dW = _noise_between(ens, times)
    g = _integrands(snaps, times)
    stoch = np.sum(g * dW, axis=(-1, -2))
    return (cyl.eval(F, ens) - _initial_value(snaps, times) - stoch,)


def ito_reconstruction_residual(F: CylinderFunction, ens, snaps: dict = None,
                                **snapshot_kw) -> np.ndarray:
    """R = F - F_0 - sum_j <grad_{tau_j} F_{tau_j}, W_{tau_{j+1}} - W_{tau_j}> per path.

    ``ens`` may be a PathEnsemble or a list of chunks (F_0 is pooled per chunk).
    """
    return _per_chunk(_residual_terms, F, ens, snaps, snapshot_kw)[0]


def _qv_terms(F, ens, snaps):
    times = _check_times(snaps)
    a = np.stack([snaps[t].value_halves()[0] for t in times], axis=1)
    b = np.stack([snaps[t].value_halves()[1] for t in times], axis=1)
    qv = np.sum(np.diff(a, axis=1) * np.diff(b, axis=1), axis=1)
    _, sq = _integrands(snaps, times, unbiased_square=True)
    comp = np.sum(sq * np.diff(times), axis=1)
    return qv, comp, np.full(len(qv), np.max(np.diff(times)))


def _qv_result(qv, comp, dt, level, margin_constant) -> MartingaleTestResult:
    d = qv - comp
    est, se = stats.mean_se(d)
    z = stats.z_value(level, sided=2)
    marg = stats.margin(float(dt.max()), stats.rms(d), margin_constant)
    return MartingaleTestResult("quadratic_variation", float(est / se) if se > 0 else 0.0,
                                float(est), (float(est - z * se), float(est + z * se)), marg,
                                stats.identity_verdict(est, se, marg, z),
                                {"qv_mean": float(qv.mean()), "compensator_mean": float(comp.mean())})


def quadratic_variation_check(F: CylinderFunction, ens, snaps: dict = None,
                              level: float = 0.99, margin_constant: float = stats.MARGIN_CONSTANT,
                              **snapshot_kw) -> MartingaleTestResult:
    """sum (F_{tau_{j+1}} - F_{tau_j})^2 against sum |grad_{tau_j} F_{tau_j}|^2 dtau."""
    qv, comp, dt = _per_chunk(_qv_terms, F, ens, snaps, snapshot_kw)
    return _qv_result(qv, comp, dt, level, margin_constant)


def _isometry_terms(F, ens, snaps):
    times = _check_times(snaps)
    g, sq = _integrands(snaps, times, unbiased_square=True)
    lhs = np.sum(sq * np.diff(times), axis=1)
    dW = _noise_between(ens, times)
    M = np.sum(g * dW, axis=-1)
    plain = (cyl.eval(F, ens) - _initial_value(snaps, times)) ** 2
    cross = np.sum(M, axis=1) ** 2 - np.sum(M * M, axis=1)
    return lhs, plain, cross, np.full(len(lhs), np.max(np.diff(times)))


def _isometry_result(lhs, plain, cross, dt, level, margin_constant) -> MartingaleTestResult:
    rhs = plain - cross
    z = stats.z_value(level, sided=2)
    lm, ls = stats.mean_se(lhs)
    rm, rs = stats.mean_se(rhs)
    d = rhs - lhs
    dm, ds = stats.mean_se(d)
    marg = stats.margin(float(dt.max()), stats.rms(d), margin_constant)
    return MartingaleTestResult(
        "ito_isometry", float(dm / ds) if ds > 0 else 0.0, float(dm),
        (float(dm - z * ds), float(dm + z * ds)), marg, stats.identity_verdict(dm, ds, marg, z),
        {"lhs": float(lm), "lhs_ci": [float(lm - z * ls), float(lm + z * ls)],
         "rhs": float(rm), "rhs_ci": [float(rm - z * rs), float(rm + z * rs)],
         "rhs_plain": float(plain.mean()),
         "rhs_plain_se": float(stats.mean_se(plain)[1])})


def ito_isometry_check(F: CylinderFunction, ens, snaps: dict = None,
                       level: float = 0.99, margin_constant: float = stats.MARGIN_CONSTANT,
                       **snapshot_kw) -> MartingaleTestResult:
    """E int |grad_t F_t|^2 dt against E (F - F_0)^2.

    The variance side subtracts the cross terms 2 sum_{j<k} M_j M_k of the
    martingale increments M_j = <g_j, dW_j>; they have mean zero exactly, so the
    estimator stays unbiased while its spread drops to that of sum M_j^2.
    """
    lhs, plain, cross, dt = _per_chunk(_isometry_terms, F, ens, snaps, snapshot_kw)
    return _isometry_result(lhs, plain, cross, dt, level, margin_constant)


def _residual_result(R, F_dev, level) -> MartingaleTestResult:
    """E[R] = 0 holds exactly for exact conditional gradients, whatever the step size;
    only a rounding allowance relative to the spread of F - F_0 is granted."""
    est, se = stats.mean_se(R)
    z = stats.z_value(level, sided=2)
    marg = 1e-12 * max(1.0, stats.rms(F_dev))
    return MartingaleTestResult(
        "ito_residual", float(est / se) if se > 0 else 0.0, float(est),
        (float(est - z * se), float(est + z * se)), marg,
        stats.identity_verdict(est, se, marg, z),
        {"max_abs": float(np.max(np.abs(R))), "mean_sq": float(np.mean(R * R)),
         "mean_sq_se": float(stats.mean_se(R * R)[1])})


def identity_suite(F: CylinderFunction, ens, level: float = 0.99,
                   margin_constant: float = stats.MARGIN_CONSTANT, **snapshot_kw) -> dict:
    """Reconstruction residual, quadratic variation and Ito isometry from one pass.

    ``ens`` is a PathEnsemble or an iterable of chunks; snapshots are built per
    chunk at every recorded time.  Returns {name: MartingaleTestResult}.
    """
    def terms(F, e, snaps):
        R, = _residual_terms(F, e, snaps)
        dev = cyl.eval(F, e) - _initial_value(snaps, _check_times(snaps))
        return (R, dev) + _qv_terms(F, e, snaps) + _isometry_terms(F, e, snaps)

    R, dev, qv, comp, dt, lhs, plain, cross, dt2 = _per_chunk(terms, F, ens, None, snapshot_kw)
    out = {r.name: r for r in (_residual_result(R, dev, level),
                               _qv_result(qv, comp, dt, level, margin_constant),
                               _isometry_result(lhs, plain, cross, dt2, level, margin_constant))}
    return out


def submartingale_test(Y: np.ndarray, times: Sequence[float], h: float, level: float = 0.99,
                       pairs: str = "all", extra: Sequence = (), column_var=None,
                       margin_constant: float = stats.MARGIN_CONSTANT,
                       name: str = "submartingale") -> MartingaleTestResult:
    """One-sided test that E[Y_{t_k} - Y_{t_j}] >= 0 for check-time pairs j < k.

    ``column_var`` gives the variance of estimation noise shared by all paths in
    a column (e.g. a deterministic value at t = 0 estimated once); it is added
    to the sampling variance of every pair using that column.  ``extra`` holds
    further (label, increment samples) groups, e.g. conditional increments on
    fixed path prefixes; all tests share one Bonferroni budget.  The reported
    estimate is the group with the smallest standardized value.
    """
    Y = np.asarray(Y, dtype=float)
    J = Y.shape[1]
    cvar = np.zeros(J) if column_var is None else np.asarray(column_var, dtype=float)
    if pairs == "all":
        idx = [(j, k) for j in range(J) for k in range(j + 1, J)]
    elif pairs == "consecutive":
        idx = [(j, j + 1) for j in range(J - 1)]
    else:
        raise ValueError("pairs must be 'all' or 'consecutive'")
    groups = [(f"{times[j]:g}->{times[k]:g}", Y[:, k] - Y[:, j], cvar[j] + cvar[k], (j, k))
              for j, k in idx]
    groups += [(lab, np.asarray(x, dtype=float), 0.0, None) for lab, x in extra]
    z = stats.z_value(level, tests=len(groups), sided=1)
    rows = []
    for lab, d, var0, jk in groups:
        est, se = stats.mean_se(d)
        se = float(np.sqrt(se * se + var0))
        marg = stats.margin(h, stats.rms(d), margin_constant)
        score = (est + marg) / se if se > 0 else (np.inf if est + marg >= -1e-12 else -np.inf)
        rows.append((score, lab, float(est), se, marg, jk))
    score, lab, est, se, marg, jk = min(rows, key=lambda r: r[0])
    verdict = stats.worst(stats.inequality_verdict(e, s, mg + 1e-12, z)
                          for _, _, e, s, mg, _ in rows)
    return MartingaleTestResult(name, float(score), est, (est - z * se, est + z * se), marg,
                                verdict, {"worst_pair": lab, "worst_index": jk,
                                          "tests": len(groups), "z": z})


def chunked_ensembles(m, start, grid: TimeGrid, seed: int, n_paths: int, chunk_size: int = 1000,
                      tag="path"):
    """Generator of fully recorded ensembles covering path ids 0..n_paths-1."""
    from .pathsim import chunk_ids, sample_paths
    for ids in chunk_ids(n_paths, chunk_size):
        yield sample_paths(m, start, grid, seed, ids, tag=tag)


def residual_slope(F: CylinderFunction, m, start, T: float, steps: Sequence[float], seed: int,
                   n_paths: int, tag="path", chunk_size: int = 1000) -> tuple:
    """log-log slope of E[R^2] against h for closed-form functions; returns (slope, table)."""
    table = []
    for h in steps:
        grid = TimeGrid.uniform(T, h, include=F.times)
        R = ito_reconstruction_residual(
            F, chunked_ensembles(m, start, grid, seed, n_paths, chunk_size, tag),
            method="closed_form")
        table.append((float(h), float(np.mean(R * R)), float(stats.mean_se(R * R)[1])))
    hs = np.log([r[0] for r in table])
    es = np.log([r[1] for r in table])
    slope = float(np.polyfit(hs, es, 1)[0])
    return slope, table


def calibrate_margin_constant(n: int = 2, h: float = 1e-2, n_paths: int = 20000,
                              seed: int = 0) -> float:
    """RMS(R) / (sqrt(h) RMS(F - F_0)) for f(y) = |y|^2 on euclidean space from the origin, T = 1."""
    T = 1.0
    from . import geometry as geo
    from .pathsim import sample_paths
    m = geo.euclidean(n)
    F = cyl.one_point(cyl.Quadratic(np.zeros(n)), T)
    grid = TimeGrid.uniform(T, h)
    ens = sample_paths(m, geo.start_framepoint(m), grid, seed, np.arange(n_paths))
    R = ito_reconstruction_residual(F, ens, method="closed_form")
    dev = cyl.eval(F, ens) - n * T
    return stats.rms(R) / (np.sqrt(h) * stats.rms(dev))
