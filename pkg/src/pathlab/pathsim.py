"""Horizontal Brownian motion on the frame bundle by geodesic random walk.

Every outer path owns a counter-based random stream keyed by (seed, stream
tuple), so an ensemble is a deterministic function of (seed, path ids, grid)
no matter how the ids are split into chunks or across worker processes.
"""
from __future__ import annotations

import pickle
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from . import geometry as geo

_M64 = (1 << 64) - 1


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# random streams

def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def _stream_key(stream: tuple) -> int:
    h = _splitmix64(len(stream))
    for item in stream:
        if isinstance(item, str):
            item = zlib.crc32(item.encode())
        h = _splitmix64(h ^ (int(item) & _M64))
    return h


@dataclass(frozen=True)
class RngStream:
    """Counter-based random source identified by (seed, stream, counter).

    The counter selects an independent block of the Philox sequence, so the
    same triple always reproduces the same numbers.
    """
    seed: int
    stream: tuple = ()
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _M64, _stream_key(self.stream)], dtype=np.uint64)
        ctr = np.array([0, 0, 0, self.counter & _M64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def normals(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def child(self, *index) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(index), 0)

    def advance(self, k: int = 1) -> "RngStream":
        return RngStream(self.seed, self.stream, self.counter + k)


# ---------------------------------------------------------------------------
# grids and paths

@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 1 or t[0] != 0.0:
            raise ConfigurationError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ConfigurationError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, h: float, include: Sequence[float] = ()) -> "TimeGrid":
        """Uniform grid of step h on [0, T], refined so that ``include`` are grid times."""
        if T < 0 or h <= 0:
            raise ConfigurationError("need T >= 0 and h > 0")
        K = int(round(T / h))
        if K == 0 and T > 0:
            K = 1
        base = np.linspace(0.0, T, K + 1) if T > 0 else np.array([0.0])
        extra = [float(t) for t in include if 0 <= t <= T]
        times = np.concatenate([base, extra])
        times = np.unique(times)
        keep = np.concatenate([[True], np.diff(times) > 1e-12])
        return cls(times[keep])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def K(self) -> int:
        return len(self.times) - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def h(self) -> float:
        return float(np.max(self.steps)) if self.K else 0.0

    def index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-10:
            raise ConfigurationError(f"time {t} is not a grid time")
        return k

    def tail(self, t: float) -> "TimeGrid":
        """Grid of the remaining times after t, shifted to start at 0."""
        k = self.index(t)
        return TimeGrid(self.times[k:] - self.times[k])


@dataclass
class PathEnsemble:
    """A batch of framed paths.

    points: (P, R, dim), frames: (P, R, dim, n) at the recorded grid indices
    ``record``; increments: (P, K, n) (all steps) or None.
    """
    model: geo.ManifoldModel
    grid: TimeGrid
    record: np.ndarray
    points: np.ndarray
    frames: np.ndarray
    increments: Optional[np.ndarray]
    path_ids: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(len(self.path_ids), dtype=bool)

    def __len__(self):
        return len(self.path_ids)

    def slot(self, k: int) -> int:
        """Position of grid index k inside the recorded arrays."""
        pos = np.searchsorted(self.record, k)
        if pos >= len(self.record) or self.record[pos] != k:
            raise ConfigurationError(f"grid index {k} was not recorded")
        return int(pos)

    def at(self, t: float):
        j = self.slot(self.grid.index(t))
        return self.points[:, j], self.frames[:, j]

    def path(self, i: int) -> "FramedPath":
        return FramedPath(self.model, self.grid, self.record, self.points[i], self.frames[i],
                          None if self.increments is None else self.increments[i],
                          int(self.path_ids[i]))

    def subset(self, mask) -> "PathEnsemble":
        return PathEnsemble(self.model, self.grid, self.record, self.points[mask],
                            self.frames[mask],
                            None if self.increments is None else self.increments[mask],
                            self.path_ids[mask], self.valid[mask])


@dataclass
class FramedPath:
    model: geo.ManifoldModel
    grid: TimeGrid
    record: np.ndarray
    points: np.ndarray
    frames: np.ndarray
    increments: Optional[np.ndarray]
    path_id: int = 0

    def at(self, t: float):
        k = self.grid.index(t)
        j = int(np.searchsorted(self.record, k))
        if j >= len(self.record) or self.record[j] != k:
            raise ConfigurationError(f"time {t} was not recorded")
        return self.points[j], self.frames[j]

    def transport(self, t: float, w) -> np.ndarray:
        """P_t w in initial-frame coordinates for a tangent vector w at X_t."""
        p, u = self.at(t)
        return geo.frame_components(self.model, p, u, w)


# ---------------------------------------------------------------------------
# stepping

def walk(m: geo.ManifoldModel, point, frame, increments, record=None, valid=None):
    """Run the geodesic random walk from (point, frame) driven by increments.

    increments has shape (..., K, n) and already carries the sqrt(dt) scaling.
    Returns (points, frames, valid) at the step indices in ``record``
    (default: all K+1 indices).
    """
    increments = np.asarray(increments, dtype=float)
    K = increments.shape[-2]
    point = np.asarray(point, dtype=float)
    frame = np.asarray(frame, dtype=float)
    lead = np.broadcast_shapes(increments.shape[:-2], point.shape[:-1], frame.shape[:-2])
    if m.kind in ("sphere", "hyperbolic") and USE_COMPILED and _kernels.HAVE_NUMBA and valid is None:
        return _compiled_walk(m, point, frame, increments, lead, record)
    increments = np.broadcast_to(increments, lead + increments.shape[-2:])
    p = np.broadcast_to(point, lead + (m.dim,)).copy()
    u = np.broadcast_to(frame, lead + (m.dim, m.n)).copy()
    record = np.arange(K + 1) if record is None else np.asarray(record, dtype=int)
    pts = np.empty(lead + (len(record), m.dim))
    frs = np.empty(lead + (len(record), m.dim, m.n))
    ok = np.ones(lead, dtype=bool) if valid is None else np.array(valid, dtype=bool)
    want = {int(k): j for j, k in enumerate(record)}
    if 0 in want:
        pts[..., want[0], :] = p
        frs[..., want[0], :, :] = u
    for k in range(K):
        dw = increments[..., k, :]
        if m.kind == "euclidean":
            p = p + np.einsum("...dk,...k->...d", u, dw)
        elif m.kind == "chart":
            p, u, ok = _chart_step(m, p, u, dw, ok)
        else:
            fp = geo.random_walk_step(m, p, u, dw)
            p, u = fp.point, fp.frame
        j = want.get(k + 1)
        if j is not None:
            pts[..., j, :] = p
            frs[..., j, :, :] = u
    return pts, frs, ok


# set to False to run the reference numpy stepping for spheres and hyperboloids
USE_COMPILED = True


def _index_map(shape, lead):
    """Row index into the flattened array of ``shape`` for every element of ``lead``."""
    size = int(np.prod(shape)) if shape else 1
    idx = np.arange(size).reshape(shape) if shape else np.zeros((), dtype=np.int64)
    return np.ascontiguousarray(np.broadcast_to(idx, lead).reshape(-1), dtype=np.int64)


def _compiled_walk(m, point, frame, increments, lead, record):
    K, n = increments.shape[-2:]
    if point.shape[:-1] != frame.shape[:-2]:
        point = np.broadcast_to(point, np.broadcast_shapes(point.shape[:-1], frame.shape[:-2])
                                + (m.dim,))
        frame = np.broadcast_to(frame, point.shape[:-1] + (m.dim, m.n))
    sshape = point.shape[:-1]
    ishape = increments.shape[:-2]
    p0 = np.ascontiguousarray(point.reshape(-1, m.dim))
    u0 = np.ascontiguousarray(frame.reshape(-1, m.dim, m.n))
    inc = np.ascontiguousarray(increments.reshape(-1, K, n))
    rec = np.arange(K + 1) if record is None else np.asarray(record, dtype=np.int64)
    if np.any(np.diff(rec) <= 0):
        rec = np.unique(rec)
    M = int(np.prod(lead)) if lead else 1
    out_p = np.empty((M, len(rec), m.dim))
    out_u = np.empty((M, len(rec), m.dim, m.n))
    _kernels.embedded_walk(m.kind == "hyperbolic", float(m.radius), p0, u0,
                           _index_map(sshape, lead), inc, _index_map(ishape, lead),
                           rec.astype(np.int64), out_p, out_u)
    return (out_p.reshape(lead + (len(rec), m.dim)), out_u.reshape(lead + (len(rec), m.dim, m.n)),
            np.ones(lead, dtype=bool))


def _chart_step(m, p, u, dw, ok):
    try:
        fp = geo.random_walk_step(m, p, u, dw)
        return fp.point, fp.frame, ok
    except geo.DomainError:
        pass
    # locate offending paths one at a time and freeze them
    p2, u2, ok2 = p.copy(), u.copy(), ok.copy()
    for idx in np.ndindex(*p.shape[:-1]):
        if not ok2[idx]:
            continue
        try:
            fp = geo.random_walk_step(m, p[idx], u[idx], dw[idx])
            p2[idx], u2[idx] = fp.point, fp.frame
        except geo.DomainError:
            ok2[idx] = False
    return p2, u2, ok2


def draw_increments(seed: int, path_ids, grid: TimeGrid, n: int, tag="path") -> np.ndarray:
    """Wiener increments (P, K, n), one stream per path id."""
    sq = np.sqrt(grid.steps)[:, None]
    out = np.empty((len(path_ids), grid.K, n))
    for i, pid in enumerate(path_ids):
        out[i] = RngStream(seed, (tag, int(pid))).normals((grid.K, n)) * sq
    return out


def sample_paths(m: geo.ManifoldModel, start: geo.FramePoint, grid: TimeGrid, seed: int,
                 path_ids, record=None, keep_increments=True, tag="path") -> PathEnsemble:
    """Sample an ensemble of framed paths with ids ``path_ids``."""
    path_ids = np.asarray(path_ids, dtype=np.int64)
    if np.max(geo.orthonormality_error(m, start.point, start.frame)) > 1e-8:
        raise ConfigurationError("start frame is not orthonormal")
    inc = draw_increments(seed, path_ids, grid, m.n, tag)
    record = np.arange(grid.K + 1) if record is None else np.unique(np.asarray(record, dtype=int))
    pts, frs, ok = walk(m, start.point, start.frame, inc, record)
    return PathEnsemble(m, grid, record, pts, frs, inc if keep_increments else None, path_ids, ok)


def sample_path(m: geo.ManifoldModel, start: geo.FramePoint, grid: TimeGrid,
                rng: RngStream) -> FramedPath:
    inc = rng.normals((grid.K, m.n)) * np.sqrt(grid.steps)[:, None]
    pts, frs, ok = walk(m, start.point, start.frame, inc)
    if not ok:
        raise geo.DomainError("path left the chart domain")
    return FramedPath(m, grid, np.arange(grid.K + 1), pts, frs, inc)


def continuation(m: geo.ManifoldModel, path: FramedPath, t: float, grid_tail: TimeGrid,
                 rng: RngStream) -> FramedPath:
    """Prefix of ``path`` up to t followed by a fresh Brownian continuation."""
    k = path.grid.index(t)
    if not np.all(path.record[: k + 1] == np.arange(k + 1)):
        raise ConfigurationError("continuation needs the full prefix recorded")
    p, u = path.at(t)
    inc = rng.normals((grid_tail.K, m.n)) * np.sqrt(grid_tail.steps)[:, None]
    pts, frs, _ = walk(m, p, u, inc)
    times = np.concatenate([path.grid.times[: k + 1], t + grid_tail.times[1:]])
    prefix_inc = path.increments[:k] if path.increments is not None else np.zeros((k, m.n))
    return FramedPath(m, TimeGrid(times), np.arange(len(times)),
                      np.concatenate([path.points[: k + 1], pts[1:]]),
                      np.concatenate([path.frames[: k + 1], frs[1:]]),
                      np.concatenate([prefix_inc, inc]), path.path_id)


def offset_starts(m: geo.ManifoldModel, point, frame, offsets) -> tuple[np.ndarray, np.ndarray]:
    """Start states exp_p(w) with frames transported along the offset geodesics.

    ``offsets`` has shape (O, n) in frame coordinates; returns arrays with an
    inserted offset axis: points (..., O, dim), frames (..., O, dim, n).
    """
    offsets = np.asarray(offsets, dtype=float)
    point = np.asarray(point, dtype=float)[..., None, :]
    frame = np.asarray(frame, dtype=float)[..., None, :, :]
    lead = np.broadcast_shapes(point.shape[:-1], offsets.shape[:-1])
    p = np.broadcast_to(point, lead + (m.dim,))
    u = np.broadcast_to(frame, lead + (m.dim, m.n))
    w = np.einsum("...dk,...k->...d", u, np.broadcast_to(offsets, lead + (m.n,)))
    fp = geo.transport_frame(m, p, w, 1.0, u)
    return fp.point, fp.frame


def coupled_perturbed_continuations(m, path: FramedPath, t: float, offsets, grid_tail: TimeGrid,
                                    rng: RngStream) -> list:
    """One continuation per offset, all driven by the same Wiener increments.

    Offsets are tangent vectors at X_t given in frame coordinates.
    """
    p, u = path.at(t)
    starts, frames = offset_starts(m, p, u, offsets)
    inc = rng.normals((grid_tail.K, m.n)) * np.sqrt(grid_tail.steps)[:, None]
    out = []
    for o in range(len(offsets)):
        pts, frs, _ = walk(m, starts[o], frames[o], inc)
        out.append(FramedPath(m, grid_tail, np.arange(grid_tail.K + 1), pts, frs, inc, path.path_id))
    return out


# ---------------------------------------------------------------------------
# chunked parallel execution

def chunk_ids(n_paths: int, chunk_size: int, offset: int = 0) -> list:
    return [np.arange(a, min(a + chunk_size, n_paths)) + offset
            for a in range(0, n_paths, chunk_size)]


def _picklable(*objs) -> bool:
    # chart models carry closures; those jobs run in-process
    try:
        pickle.dumps(objs)
        return True
    except Exception:
        return False


def parallel_map(fn, jobs: list, workers: int = 1) -> list:
    """Map fn over jobs, preserving order.  Results do not depend on ``workers``."""
    if workers <= 1 or len(jobs) <= 1 or not _picklable(fn, jobs[0]):
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# binary dump

_HEADER = struct.Struct("<iid")


def write_path_dump(ens: PathEnsemble, fh) -> None:
    """Little-endian dump: header (n, K, h) then, per path, K+1 records of
    point (dim), frame (dim*n) and increment (n; zero for the start record)."""
    n, K = ens.model.n, ens.grid.K
    if len(ens.record) != K + 1:
        raise ConfigurationError("path dump needs every grid index recorded")
    fh.write(_HEADER.pack(n, K, ens.grid.h))
    inc = ens.increments if ens.increments is not None else np.zeros((len(ens), K, n))
    for i in range(len(ens)):
        rec = np.concatenate([
            ens.points[i],
            ens.frames[i].reshape(K + 1, -1),
            np.concatenate([np.zeros((1, n)), inc[i]]),
        ], axis=1)
        fh.write(rec.astype("<f8").tobytes())


def read_path_dump(fh, dim: int):
    n, K, h = _HEADER.unpack(fh.read(_HEADER.size))
    width = dim + dim * n + n
    data = np.frombuffer(fh.read(), dtype="<f8").reshape(-1, K + 1, width)
    points = data[..., :dim]
    frames = data[..., dim:dim + dim * n].reshape(len(data), K + 1, dim, n)
    increments = data[:, 1:, dim + dim * n:]
    return n, K, h, points, frames, increments
