"""Sampled paths and weighted path ensembles.

A ``PathEnsemble`` stores every path on a shared time grid, so the points
array has shape ``(N, T, 2)``.  Positions are reduced into the period-2
torus; displacements between samples are always read through
``torus_delta`` so audits stay wrap-safe.

Binary layout of ``PathEnsemble.save`` (all little-endian)::

    magic      8 bytes   b"DPWENS01"
    meta_len   uint32    length of the UTF-8 JSON metadata block
    N          uint64    number of paths
    T          uint32    number of sample times
    meta       meta_len bytes of JSON
    times      T float64
    weights    N float64
    points     N*T*2 float64, row-major (path, time, coordinate)
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dyadic import TORUS_PERIOD, torus_delta

MAGIC = b"DPWENS01"


@dataclass
class Path:
    times: np.ndarray
    points: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.times.ndim != 1 or len(self.times) != len(self.points):
            raise ValueError("times and points must have matching length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("path times must be strictly increasing")

    def at(self, t: float) -> np.ndarray:
        return _interpolate(self.times, self.points[None], t)[0]

    def unwrapped(self) -> np.ndarray:
        return unwrap(self.points[None])[0]


def unwrap(points: np.ndarray) -> np.ndarray:
    """Continuous lift of sampled torus positions along the time axis."""
    steps = torus_delta(points[:, :-1], points[:, 1:])
    out = np.empty_like(points)
    out[:, 0] = points[:, 0]
    out[:, 1:] = points[:, :1] + np.cumsum(steps, axis=1)
    return out


def _interpolate(times: np.ndarray, points: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolation in time of the lifted positions, reduced mod 2."""
    if t < times[0] or t > times[-1]:
        raise ValueError(f"time {t} outside sampled range [{times[0]}, {times[-1]}]")
    j = int(np.searchsorted(times, t))
    if j < len(times) and times[j] == t:
        return points[:, j].copy()
    a, b = times[j - 1], times[j]
    lam = (t - a) / (b - a)
    step = torus_delta(points[:, j - 1], points[:, j])
    return np.mod(points[:, j - 1] + lam * step, TORUS_PERIOD)


@dataclass
class PathEnsemble:
    times: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        n, t = self.points.shape[:2]
        if self.points.shape != (n, t, 2) or len(self.times) != t or len(self.weights) != n:
            raise ValueError("inconsistent ensemble array shapes")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("ensemble times must be strictly increasing")

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i) -> Path:
        return Path(self.times, self.points[i], float(self.weights[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    def at(self, t: float) -> np.ndarray:
        """Positions of all paths at time ``t`` (shape ``(N, 2)``)."""
        return _interpolate(self.times, self.points, float(t))

    def subset(self, mask) -> "PathEnsemble":
        return PathEnsemble(self.times, self.points[mask], self.weights[mask], dict(self.metadata))

    def normalized(self) -> "PathEnsemble":
        return PathEnsemble(self.times, self.points, self.weights / self.weights.sum(), dict(self.metadata))

    @classmethod
    def from_paths(cls, paths, metadata=None) -> "PathEnsemble":
        paths = list(paths)
        times = paths[0].times
        for p in paths:
            if not np.array_equal(p.times, times):
                raise ValueError("paths must share a time grid")
        pts = np.stack([p.points for p in paths])
        return cls(times, pts, np.array([p.weight for p in paths]), metadata or {})

    # -- IO -----------------------------------------------------------------
    def save(self, path) -> None:
        meta = json.dumps(self.metadata, sort_keys=True, default=str).encode()
        n, t = self.points.shape[:2]
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQI", len(meta), n, t))
            fh.write(meta)
            fh.write(self.times.astype("<f8").tobytes())
            fh.write(self.weights.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.points, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PathEnsemble":
        with open(path, "rb") as fh:
            if fh.read(8) != MAGIC:
                raise ValueError(f"{path}: not an ensemble file")
            meta_len, n, t = struct.unpack("<IQI", fh.read(16))
            meta = json.loads(fh.read(meta_len).decode() or "{}")
            times = np.frombuffer(fh.read(8 * t), dtype="<f8")
            weights = np.frombuffer(fh.read(8 * n), dtype="<f8")
            pts = np.frombuffer(fh.read(16 * n * t), dtype="<f8").reshape(n, t, 2)
        return cls(times.copy(), pts.copy(), weights.copy(), meta)

    def to_csv(self, path) -> None:
        """One row per (path, sample): ``path,weight,t,x1,x2``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "weight", "t", "x1", "x2"])
            for i in range(len(self)):
                for j, t in enumerate(self.times):
                    x1, x2 = self.points[i, j]
                    w.writerow([i, repr(float(self.weights[i])), repr(float(t)), repr(float(x1)), repr(float(x2))])


def stop_backward(path: Path, tau: float) -> Path:
    """Backward stopping: the path frozen at its time-``tau`` value on ``[0, tau]``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    ens = stop_ensemble(PathEnsemble(path.times, path.points[None], np.array([path.weight])), tau)
    return ens[0]


def stop_ensemble(e: PathEnsemble, tau: float) -> PathEnsemble:
    """Stop every path of ``e`` backward at ``tau``; weights are unchanged."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    times, pts = e.times, e.points
    if tau <= times[0]:
        return PathEnsemble(times.copy(), pts.copy(), e.weights.copy(), dict(e.metadata))
    tau = min(tau, float(times[-1]))
    if not np.any(times == tau):
        j = int(np.searchsorted(times, tau))
        frozen = _interpolate(times, pts, tau)
        times = np.insert(times, j, tau)
        pts = np.insert(pts, j, frozen, axis=1)
    else:
        frozen = pts[:, int(np.flatnonzero(times == tau)[0])]
        pts = pts.copy()
    before = times < tau
    pts[:, before] = frozen[:, None, :]
    meta = dict(e.metadata)
    meta["stopped_at"] = tau
    return PathEnsemble(times, pts, e.weights.copy(), meta)
