"""Piecewise-constant densities on dyadic grids and their exact transport.

A full stage permutes cells rigidly (each filled square turns a quarter),
so transporting a ``GridDensity`` is an array permutation.  Rather than
gathering through ``quarter_turn_indices`` we roll the grid by half a
square, view it as square blocks and rotate the filled blocks in place;
the two agree cell for cell (see the tests).

Time convention: ``forward`` moves a density from ``2**-k-1`` to ``2**-k``
(``rho_late(Q c) = rho_early(c)``), ``backward`` does the reverse.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dyadic import Dyadic, cell_indices, cells_per_side
from .exact_flow import flow_to_stage_end
from .field import stage_indices, u_velocity

FORWARD = 1
BACKWARD = -1


class DensityLevelError(ValueError):
    """The grid is too coarse for the requested stage; refine it first."""


@dataclass
class GridDensity:
    level: int
    values: np.ndarray  # shape (2**(level+1), 2**(level+1)), indexed [ix, iy]
    bound: float = 1.0

    def __post_init__(self):
        n = cells_per_side(self.level)
        self.values = np.asarray(self.values)
        if self.values.shape != (n, n):
            raise ValueError(f"level {self.level} needs a {n}x{n} value array, got {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > self.bound):
            raise ValueError(f"density values must lie in [0, {self.bound}]")

    @classmethod
    def constant(cls, level: int, value: float = 1.0) -> "GridDensity":
        n = cells_per_side(level)
        return cls(level, np.full((n, n), value), max(value, 1.0))

    @classmethod
    def checkerboard(cls, level: int, scale: int = 0, complement: bool = False) -> "GridDensity":
        """Indicator of odd cells of the level-``scale`` checkerboard, stored at ``level``."""
        if scale > level:
            raise DensityLevelError(f"level {level} cannot hold a level-{scale} checkerboard")
        i = np.arange(cells_per_side(level)) >> (level - scale)
        v = ((i[:, None] + i[None, :]) & 1).astype(np.uint8)
        return cls(level, 1 - v if complement else v, 1.0)

    def complement(self) -> "GridDensity":
        return GridDensity(self.level, self.bound - self.values, self.bound)

    def mean(self) -> float:
        return float(self.values.mean(dtype=float))

    def refine(self, level: int) -> "GridDensity":
        if level < self.level:
            raise ValueError("refine to a finer level")
        r = 1 << (level - self.level)
        return GridDensity(level, np.repeat(np.repeat(self.values, r, axis=0), r, axis=1), self.bound)

    def coarsen(self, level: int) -> "GridDensity":
        """Exact cell averages at a coarser level."""
        if level > self.level:
            raise ValueError("coarsen to a coarser level")
        r = 1 << (self.level - level)
        n = cells_per_side(level)
        blocks = self.values.reshape(n, r, n, r).sum(axis=(1, 3), dtype=float)
        return GridDensity(level, blocks / (r * r), self.bound)

    def support(self) -> np.ndarray:
        return self.values > 0

    def lookup(self, points) -> np.ndarray:
        ix, iy = cell_indices(points, self.level)
        return self.values[ix, iy]

    def __eq__(self, other):
        return (
            isinstance(other, GridDensity)
            and self.level == other.level
            and np.array_equal(self.values, other.values)
        )


def pushforward_stage(d: GridDensity, stage: int, direction: int = FORWARD) -> GridDensity:
    """Transport through one full stage; a pure permutation of cell values."""
    if d.level < stage + 1:
        raise DensityLevelError(
            f"level {d.level} is too coarse for stage {stage}; refine to level >= {stage + 1}"
        )
    s = 1 << (d.level - stage)  # cells per square side
    half = s // 2
    n = cells_per_side(d.level)
    b = n // s
    v = np.roll(d.values, (half, half), axis=(0, 1))
    blocks = v.reshape(b, s, b, s).swapaxes(1, 2)  # (bi, bj, i, j)
    turned = np.rot90(blocks, 1 if direction > 0 else -1, axes=(2, 3))
    parity = (np.arange(b)[:, None] + np.arange(b)[None, :]) % 2 == 0
    out = np.where(parity[:, :, None, None], turned, blocks)
    out = out.swapaxes(1, 2).reshape(n, n)
    return GridDensity(d.level, np.roll(out, (-half, -half), axis=(0, 1)), d.bound)


# -- trajectories -----------------------------------------------------------

@dataclass
class DensityTrajectory:
    """Densities at dyadic times ``2**-j``, latest first."""

    entries: list = field(default_factory=list)  # [(Dyadic, GridDensity)]

    def times(self) -> list:
        return [t for t, _ in self.entries]

    def at(self, t) -> GridDensity:
        t = Dyadic.of(t)
        for s, d in self.entries:
            if s == t:
                return d
        raise KeyError(f"no snapshot at t = {t}")

    @property
    def depth(self) -> int:
        return max(-int(math.log2(float(t))) for t in self.times())

    def value(self, t, points) -> np.ndarray:
        """``rho(t, x)`` for arrays of times in ``(2**-depth, 1]`` and points.

        Points are flowed forward to the end of their stage and looked up in
        the snapshot there (transport along the exact flow).
        """
        t = np.asarray(t, dtype=float)
        pts = flow_to_stage_end(points, t, +1)
        k = stage_indices(t)
        out = np.empty(len(t))
        for stage in np.unique(k):
            sel = k == stage
            out[sel] = self.at(Dyadic(1, int(stage))).lookup(pts[sel])
        return out

    def complement(self) -> "DensityTrajectory":
        return DensityTrajectory([(t, d.complement()) for t, d in self.entries])


def evolve(initial: GridDensity, depth: int) -> DensityTrajectory:
    """Transport a time-1 density backward through stages ``0 .. depth-1``."""
    entries = [(Dyadic(1, 0), initial)]
    d = initial
    for k in range(depth):
        d = pushforward_stage(d, k, BACKWARD)
        entries.append((Dyadic(1, k + 1), d))
    return DensityTrajectory(entries)


def evolve_rho_B(depth: int, max_stage_depth: int = 30) -> DensityTrajectory:
    """``rho^B`` from the unit checkerboard at ``t = 1`` down to ``2**-depth``."""
    if depth > max_stage_depth:
        raise ValueError(f"depth {depth} exceeds max_stage_depth={max_stage_depth}")
    return evolve(GridDensity.checkerboard(depth + 1), depth)


def evolve_rho_W(depth: int, max_stage_depth: int = 30) -> DensityTrajectory:
    if depth > max_stage_depth:
        raise ValueError(f"depth {depth} exceeds max_stage_depth={max_stage_depth}")
    return evolve(GridDensity.checkerboard(depth + 1, complement=True), depth)


def expected_rho_B(level: int, j: int) -> GridDensity:
    """The closed form at ``t = 2**-j``: level-j checkerboard, complemented for odd ``j``."""
    return GridDensity.checkerboard(level, j, complement=bool(j & 1))


# -- property checks --------------------------------------------------------

@dataclass
class PropertyReport:
    checks: list = field(default_factory=list)  # dicts: property, time, passed, detail
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def add(self, prop: str, t, ok: bool, cell=None, detail: str = ""):
        row = {"property": prop, "time": str(t), "passed": bool(ok)}
        if not ok:
            row["cell"] = cell
            row["detail"] = detail
            self.failures.append(row)
        self.checks.append(row)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": self.checks, "failures": self.failures}


def _first_cell(mask: np.ndarray, level: int):
    ix, iy = np.argwhere(mask)[0]
    return [level, int(ix), int(iy)]


def check_refining(traj: DensityTrajectory) -> PropertyReport:
    """Every snapshot ``2**-j`` equals the (complemented for odd j) level-j checkerboard."""
    rep = PropertyReport()
    for t, d in traj.entries:
        j = -int(math.log2(float(t)))
        diff = d.values != expected_rho_B(d.level, j).values
        ok = not diff.any()
        rep.add("refining", t, ok, None if ok else _first_cell(diff, d.level),
                "" if ok else "differs from the closed-form checkerboard")
    return rep


def check_properties(traj_B: DensityTrajectory, traj_W: DensityTrajectory) -> PropertyReport:
    """Exact checks of (iii) sum = 1, (iv) supports cover, (v) supports disjoint,
    and (ii) unit-cell averages equal 1/2 at every ``2**-k``, ``k >= 1``."""
    rep = PropertyReport()
    for (t, b), (s, w) in zip(traj_B.entries, traj_W.entries):
        if t != s or b.level != w.level:
            raise ValueError("trajectories must share times and levels")
        bad = (b.values.astype(float) + w.values) != 1
        rep.add("(iii) sum", t, not bad.any(), None if not bad.any() else _first_cell(bad, b.level),
                "rho_B + rho_W != 1")
        uncovered = ~(b.support() | w.support())
        rep.add("(iv) cover", t, not uncovered.any(),
                None if not uncovered.any() else _first_cell(uncovered, b.level), "cell in neither support")
        both = b.support() & w.support()
        rep.add("(v) disjoint", t, not both.any(), None if not both.any() else _first_cell(both, b.level),
                "cell in both supports")
        if t < 1:
            avg = b.coarsen(0).values
            off = avg != 0.5
            rep.add("(ii) average", t, not off.any(), None if not off.any() else _first_cell(off, 0),
                    "unit-cell average != 1/2")
    return rep


# -- weak continuity-equation residual ---------------------------------------

def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _bump_prime(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    out[inside] = np.exp(-1.0 / (1.0 - si**2)) * (-2.0 * si / (1.0 - si**2) ** 2)
    return out


@dataclass(frozen=True)
class SeparableBump:
    """``phi(t, x) = B((t - tc)/tw) B(dx1/r) B(dx2/r)`` with torus offsets ``dx = x - c``."""

    tc: float
    tw: float
    c1: float
    c2: float
    r: float

    def __post_init__(self):
        if not (0 < self.tc - self.tw and self.tc + self.tw < 1):
            raise ValueError("time support must lie inside (0, 1)")
        if not 0 < self.r <= 1:
            raise ValueError("spatial radius must lie in (0, 1]")

    def _offsets(self, x):
        d = np.asarray(x, dtype=float) - np.array([self.c1, self.c2])
        return d - 2.0 * np.round(d / 2.0)

    def value(self, t, x):
        d = self._offsets(x)
        return _bump((t - self.tc) / self.tw) * _bump(d[:, 0] / self.r) * _bump(d[:, 1] / self.r)

    def derivatives(self, t, x):
        """``(dphi/dt, grad phi)``."""
        d = self._offsets(x)
        s = (np.asarray(t, dtype=float) - self.tc) / self.tw
        bt, bpt = _bump(s), _bump_prime(s) / self.tw
        b1, b2 = _bump(d[:, 0] / self.r), _bump(d[:, 1] / self.r)
        g1 = _bump_prime(d[:, 0] / self.r) / self.r * b2
        g2 = b1 * _bump_prime(d[:, 1] / self.r) / self.r
        return bpt * b1 * b2, bt[:, None] * np.stack([g1, g2], axis=1)

    def support_box(self):
        return (self.tc - self.tw, self.tc + self.tw), (self.c1, self.c2), self.r

    def to_dict(self) -> dict:
        return {"tc": self.tc, "tw": self.tw, "c1": self.c1, "c2": self.c2, "r": self.r}


BANK_SEED = 20240611


def bump_bank() -> list:
    """Ten fixed test functions: 3 spatial scales x 3 time windows, plus one
    small bump straddling the stage boundary ``t = 1/4``."""
    rng = np.random.default_rng(BANK_SEED)
    windows = [(0.75, 0.2), (0.5, 0.15), (0.3, 0.12)]  # the middle one straddles t = 1/2
    bank = []
    for r in (0.75, 0.3, 0.1):
        for tc, tw in windows:
            c1, c2 = rng.uniform(0, 2, 2)
            bank.append(SeparableBump(tc, tw, float(c1), float(c2), r))
    c1, c2 = rng.uniform(0, 2, 2)
    bank.append(SeparableBump(0.25, 0.05, float(c1), float(c2), 0.05))
    return bank


@dataclass
class ResidualAccumulator:
    """Mergeable running sums for a Monte Carlo mean."""

    n: int = 0
    total: float = 0.0
    total_sq: float = 0.0
    volume: float = 1.0

    def add(self, samples: np.ndarray):
        self.n += len(samples)
        self.total += float(np.sum(samples))
        self.total_sq += float(np.sum(samples * samples))

    def merge(self, other: "ResidualAccumulator") -> "ResidualAccumulator":
        return ResidualAccumulator(self.n + other.n, self.total + other.total,
                                   self.total_sq + other.total_sq, self.volume)

    @property
    def estimate(self) -> float:
        return self.volume * self.total / self.n

    @property
    def stderr(self) -> float:
        m = self.total / self.n
        var = max(self.total_sq / self.n - m * m, 0.0)
        return self.volume * math.sqrt(var / max(self.n - 1, 1))


@dataclass
class ResidualEstimate:
    estimate: float
    stderr: float
    samples: int

    @property
    def z(self) -> float:
        return self.estimate / self.stderr if self.stderr > 0 else 0.0

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "stderr": self.stderr, "samples": self.samples, "z": self.z}


def _constant_value(t, pts):
    return np.ones(len(pts))


def weak_divergence_residual(traj, testfn: SeparableBump, samples: int, seed: int = 0,
                             chunk: int = 1 << 17) -> ResidualEstimate:
    """Monte Carlo estimate of ``int int rho (phi_t + b . grad phi) dx dt``.

    Samples are uniform on the support box of ``phi``.  ``traj=None`` means
    ``rho = 1``.  Returns the estimate and its standard error.
    """
    (ta, tb), (c1, c2), r = testfn.support_box()
    rho = _constant_value if traj is None else traj.value
    if traj is not None and ta <= 2.0 ** -traj.depth:
        raise ValueError("test function reaches below the trajectory's earliest snapshot")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    acc = ResidualAccumulator(volume=(tb - ta) * (2 * r) ** 2)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        t = rng.uniform(ta, tb, m)
        x = np.mod(np.array([c1, c2]) + rng.uniform(-r, r, (m, 2)), 2.0)
        # open time window: endpoints have zero test function anyway
        t = np.clip(t, np.nextafter(ta, 1), np.nextafter(tb, 0))
        phit, grad = testfn.derivatives(t, x)
        k = stage_indices(t)
        b = u_velocity(x * np.exp2(k)[:, None])
        acc.add(rho(t, x) * (phit + np.sum(b * grad, axis=1)))
        done += m
    return ResidualEstimate(acc.estimate, acc.stderr, acc.n)


# -- export -----------------------------------------------------------------

def write_csv(d: GridDensity, path) -> None:
    """Rows ``level,ix,iy,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "ix", "iy", "value"])
        for ix in range(d.values.shape[0]):
            for iy in range(d.values.shape[1]):
                w.writerow([d.level, ix, iy, repr(float(d.values[ix, iy]))])


def heatmap_json(traj: DensityTrajectory, level: int) -> dict:
    """Plot-ready matrices (rows indexed by ``iy`` from the top) at a common level."""
    out = []
    for t, d in traj.entries:
        m = d.coarsen(min(level, d.level)).values
        out.append({"time": str(t), "level": min(level, d.level), "matrix": np.flipud(m.T).tolist()})
    return {"snapshots": out}


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
