"""Fixed-step RK4 integration of staged fields and backward path ensembles.

Steps are aligned to the stage boundaries ``2**-k`` (and to the switch-off
time of a truncated field), so the time-discontinuities of the field only
ever fall between steps.

The exact field is also discontinuous in space.  For fields that expose
affine pieces (``velocity_pieces``/``piece_velocity``) a step whose RK4
stage points straddle two pieces is redone piece by piece: the piece
formula is extended past its boundary, the exit point is located by
bisection and integration restarts in the new piece.  Without this the
corner crossings cost ``O(step)`` each.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .dyadic import TORUS_PERIOD, Cell, Dyadic, torus_distance
from .exact_flow import GRID_BITS, trajectory_points
from .field import ZERO_PIECE, FieldDomainError, stage_index
from .mollify import MollifiedField, admissible_depth
from .paths import Path, PathEnsemble

BISECTION_STEPS = 34
MAX_SWITCHES = 8
CHUNK = 1 << 16


@dataclass(frozen=True)
class TruncatedField:
    """``inner`` for ``t >= tau``, zero before."""

    inner: object
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise FieldDomainError("truncation time must be positive")

    def velocity(self, stage: int, points) -> np.ndarray:
        if 2.0**-stage <= self.tau:
            return np.zeros_like(np.asarray(points, dtype=float))
        return self.inner.velocity(stage, points)

    def __call__(self, t, points) -> np.ndarray:
        if float(t) < self.tau:
            return np.zeros_like(np.asarray(points, dtype=float))
        return self.velocity(stage_index(t), points)

    def describe(self) -> dict:
        return {"kind": "truncated", "tau": self.tau, "inner": self.inner.describe()}


@dataclass
class TracedPath(Path):
    residual: float = 0.0


@dataclass
class IntegrationResult:
    times: np.ndarray  # increasing
    points: np.ndarray  # (N, T, 2), reduced mod 2
    residual: np.ndarray  # per path, sum over steps of |dy - h (v0 + v1) / 2|
    step: float

    def path(self, i: int = 0) -> TracedPath:
        return TracedPath(self.times, self.points[i], 1.0, float(self.residual[i]))


# -- step machinery ----------------------------------------------------------

def _rk4(f, y, h):
    h = np.asarray(h, dtype=float)[..., None] if np.ndim(h) else h
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _moved(c0, l0, c1, l1):
    return (c0[:, 0] != c1[:, 0]) | (c0[:, 1] != c1[:, 1]) | (l0 != l1)


def _resolve(field, stage, y, h, c, lab):
    """Integrate rows across piece boundaries with located exits."""
    y = y.copy()
    rem = np.full(len(y), float(h))
    out = np.empty_like(y)
    todo = np.arange(len(y))
    for _ in range(MAX_SWITCHES):
        pieces = (c, lab)
        pv = lambda z, p=pieces: field.piece_velocity(stage, z, p)
        yend = _rk4(pv, y, rem)
        _, ce, le = field.velocity_pieces(stage, yend)
        stay = ~_moved(c, lab, ce, le)
        out[todo[stay]] = yend[stay]
        go = ~stay
        if not go.any():
            return out
        todo, y, rem = todo[go], y[go], rem[go]
        c, lab = c[go], lab[go]
        pv = lambda z, p=(c, lab): field.piece_velocity(stage, z, p)
        lo, hi = np.zeros(len(y)), rem.copy()
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            _, cm, lm = field.velocity_pieces(stage, _rk4(pv, y, mid))
            # landing exactly on a diagonal (zero velocity) would stall the path
            left = _moved(c, lab, cm, lm) & ((lm != ZERO_PIECE) | (lab == ZERO_PIECE))
            hi = np.where(left, mid, hi)
            lo = np.where(left, lo, mid)
        y = _rk4(pv, y, hi)
        rem = rem - hi
        _, c, lab = field.velocity_pieces(stage, y)
        done = rem <= 0
        out[todo[done]] = y[done]
        todo, y, rem, c, lab = todo[~done], y[~done], rem[~done], c[~done], lab[~done]
        if not len(todo):
            return out
    # give up switching on pathological rows; finish with plain steps
    out[todo] = _rk4(lambda z: field.velocity(stage, z), y, rem)
    return out


def _codes(stage):
    # one float per affine piece, exact while centres stay below 2**(52 - stage - 4)
    if stage > 20:
        return None
    m = 2.0 ** (stage + 4)
    return lambda c, lab: (c[:, 0] * m + c[:, 1]) * 4.0 + lab


def _segment(field, stage, y, h, nsteps, record_every, switching, residual):
    """Advance ``y`` by ``nsteps`` steps of signed size ``h``; yields recorded states.

    Within a stage the field is autonomous, so rows starting at zero
    velocity never move and are left out of the stepping.
    """
    y = y.copy()
    if switching:
        k1, c1, l1 = field.velocity_pieces(stage, y)
        code = _codes(stage)
    else:
        f = lambda z: field.velocity(stage, z)
        k1 = f(y)
    act = np.flatnonzero(np.any(k1 != 0, axis=1))
    ya, k1 = y[act], k1[act]
    res = np.zeros(len(act))
    if switching:
        c1, l1 = c1[act], l1[act]
        if code is not None:
            q1 = code(c1, l1)
    for i in range(1, nsteps + 1):
        if switching:
            k2, c2, l2 = field.velocity_pieces(stage, ya + 0.5 * h * k1)
            k3, c3, l3 = field.velocity_pieces(stage, ya + 0.5 * h * k2)
            k4, c4, l4 = field.velocity_pieces(stage, ya + h * k3)
            yn = ya + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            kn, cn, ln = field.velocity_pieces(stage, yn)
            if code is not None:
                qn = code(cn, ln)
                bad = (code(c2, l2) != q1) | (code(c3, l3) != q1) | (code(c4, l4) != q1) | (qn != q1)
            else:
                bad = _moved(c1, l1, c2, l2) | _moved(c1, l1, c3, l3) | _moved(c1, l1, c4, l4) | _moved(c1, l1, cn, ln)
            if bad.any():
                idx = np.flatnonzero(bad)
                yn[idx] = _resolve(field, stage, ya[idx], h, c1[idx], l1[idx])
                kn[idx], cn[idx], ln[idx] = field.velocity_pieces(stage, yn[idx])
                if code is not None:
                    qn[idx] = code(cn[idx], ln[idx])
            c1, l1 = cn, ln
            if code is not None:
                q1 = qn
        else:
            k2 = f(ya + 0.5 * h * k1)
            k3 = f(ya + 0.5 * h * k2)
            k4 = f(ya + h * k3)
            yn = ya + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            kn = f(yn)
        d = yn - ya - 0.5 * h * (k1 + kn)
        res += np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
        ya, k1 = yn, kn
        if i % record_every == 0 or i == nsteps:
            y[act] = ya
            yield i, y
    residual[act] += res


def _boundaries(field, lo, hi):
    """Times in ``(lo, hi)`` where the field may jump."""
    out = []
    k = stage_index(hi) if hi > 0 else 0
    while 2.0 ** -(k + 1) > lo:
        out.append(2.0 ** -(k + 1))
        k += 1
    if isinstance(field, TruncatedField) and lo < field.tau < hi:
        out.append(field.tau)
    return sorted(set(out), reverse=True)


def _check_step(field, step):
    inner = field.inner if isinstance(field, TruncatedField) else field
    if isinstance(inner, MollifiedField) and step > inner.eps / 4 * (1 + 1e-12):
        raise ValueError(f"step {step} exceeds eps/4 = {inner.eps / 4} for a mollified field")


def integrate_points(field, starts, t0: float, t1: float, step: float, record_every: int = 1,
                     switching: bool | None = None) -> IntegrationResult:
    """RK4 from ``t0`` to ``t1`` (either direction) for an array of starts.

    Positions are recorded every ``record_every`` steps and at every stage
    boundary; the returned time grid is increasing whatever the direction.
    """
    t0, t1, step = float(t0), float(t1), float(step)
    if step <= 0:
        raise ValueError("step must be positive")
    if not (0 <= min(t0, t1) and max(t0, t1) <= 1):
        raise FieldDomainError("integration times must lie in [0, 1]")
    _check_step(field, step)
    lo, hi = min(t0, t1), max(t0, t1)
    floor_t = field.tau if isinstance(field, TruncatedField) else 0.0
    if lo <= 0 and floor_t <= 0:
        raise FieldDomainError("the staged field is undefined at t = 0; truncate it first")
    cuts = [b for b in _boundaries(field, lo, hi) if lo < b < hi]
    for b in [*cuts, t1]:
        n = (b - t0) / step
        if abs(n - round(n)) > 1e-9 * max(1.0, abs(n)):
            raise ValueError(f"step {step} is not aligned with the boundary t = {b}")
    if switching is None:
        switching = hasattr(field, "velocity_pieces")
    direction = 1.0 if t1 >= t0 else -1.0
    knots = [t0, *(cuts if direction < 0 else cuts[::-1]), t1] if t0 != t1 else [t0]
    y = np.array(starts, dtype=float).reshape(-1, 2)
    residual = np.zeros(len(y))
    rec_t, rec_y = [t0], [np.mod(y, TORUS_PERIOD)]
    for a, b in zip(knots[:-1], knots[1:]):
        nsteps = int(round(abs(b - a) / step))
        mid = 0.5 * (a + b)
        if isinstance(field, TruncatedField) and mid < field.tau or nsteps == 0:
            rec_t.append(b)
            rec_y.append(np.mod(y, TORUS_PERIOD))
            continue
        stage = stage_index(mid)
        h = direction * step
        for i, yi in _segment(field, stage, y, h, nsteps, record_every, switching, residual):
            rec_t.append(b if i == nsteps else a + i * h)
            rec_y.append(np.mod(yi, TORUS_PERIOD))
            y = yi
    times = np.array(rec_t)
    pts = np.stack(rec_y, axis=1)
    if direction < 0:
        times, pts = times[::-1].copy(), pts[:, ::-1].copy()
    return IntegrationResult(times, pts, residual, step)


def integrate(field, start, t0: float, t1: float, step: float, switching: bool | None = None) -> TracedPath:
    """Single path sampled at every step, with its integral-residual estimate."""
    return integrate_points(field, np.asarray(start, dtype=float)[None], t0, t1, step, 1, switching).path(0)


# -- seeded starts -----------------------------------------------------------

def _raw(seed: int, offset: int, count: int) -> np.ndarray:
    """Four 64-bit words per path; path ``i`` always reads Philox block ``i``."""
    gen = np.random.Philox(key=int(seed), counter=[int(offset), 0, 0, 0])
    return gen.random_raw(4 * count).reshape(count, 4)


def _stratified_level(n: int) -> int:
    level = 0
    while 4 ** (level + 1) < n:
        level += 1
    return level


def start_points(n: int, seed: int, descriptor=None, offset: int = 0, count: int | None = None) -> np.ndarray:
    """Starts ``offset .. offset+count`` of an ``n``-point seeded draw, on the 2**-40 grid.

    Descriptors: ``{"kind": "uniform"}``, ``{"kind": "stratified"}`` (at
    most one point per level-L cell, L smallest with 4**(L+1) >= n),
    ``{"kind": "cell", "cell": [level, ix, iy]}`` and
    ``{"kind": "dirac", "center": [x1, x2], "radius": r}``.
    """
    d = dict(descriptor or {"kind": "uniform"})
    count = n - offset if count is None else count
    raw = _raw(seed, offset, count)
    unit = 2.0**-GRID_BITS
    kind = d.get("kind", "uniform")
    if kind == "uniform":
        return (raw[:, :2] >> np.uint64(64 - GRID_BITS - 1)).astype(float) * unit
    if kind == "cell":
        c = Cell(*d["cell"])
        ll = np.array(c.lower_left().to_floats())
        return ll + (raw[:, :2] >> np.uint64(64 - GRID_BITS + c.level)).astype(float) * unit
    if kind == "stratified":
        level = _stratified_level(n)
        side = 2 ** (level + 1)
        perm = np.random.Generator(np.random.Philox(key=int(seed) ^ 0x5EED)).permutation(side * side)
        strata = perm[offset:offset + count]
        ll = np.stack([strata // side, strata % side], axis=1) * 2.0**-level
        return ll + (raw[:, :2] >> np.uint64(64 - GRID_BITS + level)).astype(float) * unit
    if kind == "dirac":
        center = np.asarray(d["center"], dtype=float)
        radius = float(d.get("radius", 0.0))
        u = (raw[:, :2] >> np.uint64(11)).astype(float) * 2.0**-53
        rho = radius * np.sqrt(u[:, 0])
        ang = 2 * math.pi * u[:, 1]
        p = center + np.stack([rho * np.cos(ang), rho * np.sin(ang)], axis=1)
        return np.mod(np.round(p / unit) * unit, TORUS_PERIOD)
    raise ValueError(f"unknown start descriptor kind {kind!r}")


# -- ensembles ---------------------------------------------------------------

def exact_times(depth: int, samples_per_stage: int = 1) -> list:
    """Dyadic sample times from ``2**-depth`` to 1, increasing."""
    q = samples_per_stage
    if q < 1 or q & (q - 1):
        raise ValueError("samples_per_stage must be a power of two")
    times = [Dyadic(1, depth)]
    for k in range(depth - 1, -1, -1):
        lo = Dyadic(1, k + 1)
        for j in range(1, q + 1):
            times.append(lo + lo * Dyadic(j, 0) * Dyadic(1, int(math.log2(q))))
    return times


@dataclass
class _Job:
    n: int
    depth: int
    eps: float | None
    seed: int
    start: dict
    step: float | None
    record_every: int
    samples_per_stage: int
    cache_dir: str | None
    offset: int = 0
    count: int = 0


_FIELDS: dict = {}


def _mollified_field(eps, depth, cache_dir):
    # one field object per (eps, cache) so stage tables are built once per process
    adm = admissible_depth(eps)
    key = (float(eps), None if cache_dir is None else str(cache_dir))
    if key not in _FIELDS:
        _FIELDS[key] = MollifiedField(eps, cache_dir=cache_dir)
    inner = _FIELDS[key]
    if depth - 1 > adm:
        return TruncatedField(inner, 2.0 ** -(adm + 1))
    return inner


def _run_chunk(job: _Job):
    starts = start_points(job.n, job.seed, job.start, job.offset, job.count)
    if job.eps is None:
        times = exact_times(job.depth, job.samples_per_stage)
        pts = trajectory_points(starts, times[::-1])[:, ::-1]
        return np.array([float(t) for t in times]), pts, np.zeros(len(starts))
    f = _mollified_field(job.eps, job.depth, job.cache_dir)
    res = integrate_points(f, starts, 1.0, 2.0**-job.depth, job.step, job.record_every)
    return res.times, res.points, res.residual


def default_step(eps: float) -> float:
    return eps / 8


def backward_ensemble(n: int, depth: int, eps: float | None = None, seed: int = 0, start=None,
                      step: float | None = None, record_every: int = 1, samples_per_stage: int = 1,
                      workers: int = 1, cache_dir=None, chunk: int = CHUNK) -> PathEnsemble:
    """``n`` seeded starts at ``t = 1`` traced back to ``2**-depth``; weights ``1/n``.

    ``eps=None`` uses the exact flow (sampled at stage boundaries and
    ``samples_per_stage - 1`` interior dyadic times per stage).  Otherwise
    the mollified field is integrated with RK4; stages too fine for ``eps``
    are switched off.  Output does not depend on ``workers``.
    """
    if n < 1:
        raise ValueError("need at least one path")
    if depth < 1:
        raise ValueError("depth must be at least 1")
    start = dict(start or {"kind": "uniform"})
    if eps is not None:
        step = default_step(eps) if step is None else float(step)
    job = _Job(n, depth, eps, seed, start, step, record_every, samples_per_stage,
               None if cache_dir is None else str(cache_dir))
    jobs = []
    for off in range(0, n, chunk):
        j = _Job(**{**job.__dict__, "offset": off, "count": min(chunk, n - off)})
        jobs.append(j)
    if eps is not None:
        # build (or load) the tables once before fanning out
        f = _mollified_field(eps, depth, cache_dir)
        inner = f.inner if isinstance(f, TruncatedField) else f
        for k in range(min(inner.max_stage, depth - 1) + 1):
            inner.slice(k)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    times = parts[0][0]
    pts = np.concatenate([p[1] for p in parts])
    residual = np.concatenate([p[2] for p in parts])
    meta = {
        "field": {"kind": "exact"} if eps is None else _mollified_field(eps, depth, cache_dir).describe(),
        "eps": eps,
        "seed": seed,
        "step": step,
        "depth": depth,
        "t_start": 1.0,
        "start": start,
        "n": n,
        "max_residual": float(residual.max()),
    }
    return PathEnsemble(times, pts, np.full(n, 1.0 / n), meta)


# -- audits ------------------------------------------------------------------

@dataclass
class LipschitzReport:
    max_ratio: float
    bound: float
    tolerance: float
    worst_path: int
    n_paths: int
    n_failing: int
    per_path: np.ndarray = dc_field(repr=False)

    @property
    def passed(self) -> bool:
        return self.n_failing == 0

    def to_dict(self) -> dict:
        return {
            "max_ratio": self.max_ratio,
            "bound": self.bound,
            "tolerance": self.tolerance,
            "worst_path": self.worst_path,
            "n_paths": self.n_paths,
            "n_failing": self.n_failing,
            "passed": self.passed,
        }


def lipschitz_audit(e: PathEnsemble, step: float | None = None, bound: float = 2.0) -> LipschitzReport:
    """Largest ``distance / |dt|`` over consecutive samples of each path.

    Passes when every path stays within ``bound + 10 step`` (numeric runs)
    or ``bound`` up to float rounding (exact runs, ``step=None``).
    """
    if step is None:
        step = e.metadata.get("step")
    tol = 1e-12 if step is None else 10.0 * float(step)
    if len(e.times) < 2:
        per = np.zeros(len(e))
    else:
        dt = np.diff(e.times)
        d = torus_distance(e.points[:, :-1], e.points[:, 1:])
        per = (d / dt).max(axis=1)
    worst = int(np.argmax(per)) if len(per) else -1
    return LipschitzReport(
        float(per.max()) if len(per) else 0.0, bound, tol, worst, len(e), int((per > bound + tol).sum()), per
    )
