"""Closed-form flow maps of the staged Depauw field.

Inside a filled square with centre ``c`` every point moves along the
square ring ``max|y - c| = r`` at speed ``4r`` (unit-stage coordinates),
counterclockwise as dictated by ``w = (0, 4 y1)`` on the right edge.  One
full stage therefore advances arc length ``2r``, a quarter of the ring:
the quarter turn ``(a, b) -> (-b, a)`` about the centre.

Ring arc coordinate ``s`` in ``[0, 8r)`` starts at the lower-right corner
``(r, -r)`` and runs up the right edge, left along the top, down the left
edge and right along the bottom.  Corners belong to the edge they start.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dyadic import TORUS_PERIOD, Cell, Dyadic, TorusPoint, cell_indices, cell_of, cells_per_side
from .field import FieldDomainError, stage_index
from .paths import Path

# Float starts are drawn on this dyadic grid so float64 stage maps stay exact.
GRID_BITS = 40
DEFAULT_MAX_DEPTH = 30


class FlowDepthError(ValueError):
    """A flow query crossed more stages than the configured maximum depth."""


# -- exact single-stage map ----------------------------------------------------

def _ring_coordinate(a: Dyadic, b: Dyadic, r: Dyadic) -> Dyadic:
    if a == r and b < r:
        return b + r
    if b == r and a > -r:
        return 3 * r - a
    if a == -r and b > -r:
        return 5 * r - b
    return 7 * r + a  # bottom edge, b == -r


def _ring_point(s: Dyadic, r: Dyadic) -> tuple[Dyadic, Dyadic]:
    if s < 2 * r:
        return r, s - r
    if s < 4 * r:
        return 3 * r - s, r
    if s < 6 * r:
        return -r, 5 * r - s
    return s - 7 * r, -r


def stage_flow_exact(p, stage: int, dt) -> TorusPoint:
    """Advance ``p`` by signed time ``dt`` under the stage-``stage`` field.

    ``|dt|`` may not exceed the stage length ``2**-(stage+1)``; negative
    ``dt`` runs the flow backward (exact inverse).
    """
    p = TorusPoint.of(p)
    dt = Dyadic.of(dt)
    if stage < 0:
        raise ValueError("stage must be >= 0")
    if abs(dt) > Dyadic(1, stage + 1):
        raise ValueError(f"|dt|={dt} exceeds the length of stage {stage}; split the query at stage boundaries")
    y1, y2 = p.x1.scale2(stage), p.x2.scale2(stage)
    c1, c2 = (y1 + Dyadic(1, 1)).floor(), (y2 + Dyadic(1, 1)).floor()
    if (c1 + c2) & 1:
        return p
    a, b = y1 - c1, y2 - c2
    r = max(abs(a), abs(b))
    if r == 0 or r >= Dyadic(1, 1) or dt == 0:
        return p
    perimeter = 8 * r
    s = _ring_coordinate(a, b, r) + 4 * r * dt.scale2(stage)
    if s >= perimeter:
        s = s - perimeter
    elif s < 0:
        s = s + perimeter
    a2, b2 = _ring_point(s, r)
    return TorusPoint((a2 + c1).scale2(-stage), (b2 + c2).scale2(-stage))


# -- vectorised float map --------------------------------------------------------

def stage_map_points(points, stage: int, dt: float) -> np.ndarray:
    """Float64 version of ``stage_flow_exact`` for arrays of shape ``(N, 2)``.

    Bit-exact for full stages when the inputs lie on the ``2**-GRID_BITS``
    grid; partial stages round at most once per call.
    """
    pts = np.asarray(points, dtype=float)
    if abs(dt) > 2.0 ** -(stage + 1):
        raise ValueError(f"|dt|={dt} exceeds the length of stage {stage}")
    scale = 2.0**stage
    y = pts * scale
    c = np.floor(y + 0.5)
    rel = y - c
    a, b = rel[:, 0], rel[:, 1]
    r = np.maximum(np.abs(a), np.abs(b))
    moving = ((c[:, 0] + c[:, 1]) % 2 == 0) & (r > 0) & (r < 0.5)
    out = pts.copy()
    if dt == 0 or not moving.any():
        return out
    a, b, r = a[moving], b[moving], r[moving]
    right = (a == r) & (b < r)
    top = ~right & (b == r) & (a > -r)
    left = ~right & ~top & (a == -r) & (b > -r)
    s = np.where(right, b + r, np.where(top, 3 * r - a, np.where(left, 5 * r - b, 7 * r + a)))
    s = s + 4.0 * r * (dt * scale)
    per = 8.0 * r
    s = np.where(s >= per, s - per, s)
    s = np.where(s < 0, s + per, s)
    na = np.where(s < 2 * r, r, np.where(s < 4 * r, 3 * r - s, np.where(s < 6 * r, -r, s - 7 * r)))
    nb = np.where(s < 2 * r, s - r, np.where(s < 4 * r, r, np.where(s < 6 * r, 5 * r - s, -r)))
    cm = c[moving]
    newp = np.stack([(na + cm[:, 0]) / scale, (nb + cm[:, 1]) / scale], axis=1)
    newp = np.where(newp < 0, newp + TORUS_PERIOD, newp)
    newp = np.where(newp >= TORUS_PERIOD, newp - TORUS_PERIOD, newp)
    out[moving] = newp
    return out


def grid_points(raw: np.ndarray) -> np.ndarray:
    """Map unsigned integers in ``[0, 2**(GRID_BITS+1))`` onto the exact float grid of [0, 2)."""
    return raw.astype(np.float64) * 2.0**-GRID_BITS


# -- cell permutations -------------------------------------------------------------

def quarter_turn_indices(ix, iy, level: int, stage: int, direction: int = 1):
    """Image indices of level-``level`` cells under a full stage (vectorised).

    ``direction=+1`` is forward in time, ``-1`` the inverse map.  Needs
    ``level >= stage + 1`` so filled squares are unions of cells.
    """
    if level < stage + 1:
        raise ValueError(f"cells at level {level} are too coarse for stage {stage}; refine to level >= {stage + 1}")
    m = level - stage
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    # doubled offsets in units of 2**-(m+1) at unit-stage scale
    span = 1 << (m + 1)
    u = 2 * ix + 1
    v = 2 * iy + 1
    n1 = (u + (1 << m)) // span
    n2 = (v + (1 << m)) // span
    a = u - n1 * span
    b = v - n2 * span
    filled = (n1 + n2) % 2 == 0
    if direction > 0:
        a2, b2 = -b, a
    else:
        a2, b2 = b, -a
    nx = np.where(filled, (n1 * span + a2 - 1) // 2, ix)
    ny = np.where(filled, (n2 * span + b2 - 1) // 2, iy)
    n = 1 << (level + 1)
    return nx % n, ny % n


def quarter_turn_cells(c: Cell, stage: int | None = None) -> Cell:
    """Image of cell ``c`` under the full-stage flow (default stage ``c.level - 1``)."""
    if stage is None:
        stage = c.level - 1
    if c.level < stage + 1:
        raise ValueError("cell too coarse for this stage")
    img = stage_flow_exact(c.center(), stage, Dyadic(1, stage + 1))
    return cell_of(img, c.level)


def check_quarter_turn(level: int, stage: int, exact_samples: int = 256, seed: int = 0) -> dict:
    """Compare the stage flow with the cell permutation at ``level``.

    Every cell centre goes through the float map (exact on the grid); a
    seeded sample of cells also goes through the ``Dyadic`` map.  Returns
    mismatch counts.
    """
    n = cells_per_side(level)
    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    centers = (np.stack([ix, iy], axis=1) + 0.5) * 2.0**-level
    img = stage_map_points(centers, stage, 2.0 ** -(stage + 1))
    jx, jy = cell_indices(img, level)
    qx, qy = quarter_turn_indices(ix, iy, level, stage)
    float_bad = int(np.count_nonzero((jx != qx) | (jy != qy)))
    pick = np.random.default_rng(seed).choice(n * n, size=min(exact_samples, n * n), replace=False)
    exact_bad = 0
    for i in pick:
        c = Cell(level, int(ix[i]), int(iy[i]))
        d = quarter_turn_cells(c, stage)
        if (d.ix, d.iy) != (int(qx[i]), int(qy[i])):
            exact_bad += 1
    return {"level": level, "stage": stage, "cells": n * n, "float_mismatches": float_bad,
            "exact_checked": len(pick), "exact_mismatches": exact_bad}


# -- composite flows ------------------------------------------------------------------

@dataclass(frozen=True)
class FlowQuery:
    t_start: Dyadic
    t_end: Dyadic

    def __post_init__(self):
        for name in ("t_start", "t_end"):
            v = Dyadic.of(getattr(self, name))
            if v <= 0 or v > 1:
                raise FieldDomainError(f"{name}={v} outside (0, 1]")
            object.__setattr__(self, name, v)

    @property
    def direction(self) -> int:
        return 1 if self.t_end > self.t_start else -1 if self.t_end < self.t_start else 0


def stage_segments(t_start, t_end):
    """Split ``[t_start, t_end]`` (either order) at stage boundaries.

    Returns ``(stage, a, b)`` triples with ``a`` the segment start and
    ``b`` its end, in the order the flow visits them.
    """
    t_start, t_end = Dyadic.of(t_start), Dyadic.of(t_end)
    if t_start == t_end:
        return []
    lo, hi = min(t_start, t_end), max(t_start, t_end)
    segs = []
    top = hi
    while top > lo:
        k = stage_index(top)
        bottom = max(Dyadic(1, k + 1), lo)
        segs.append((k, bottom, top))
        top = bottom
    if t_end > t_start:
        segs.reverse()
        return [(k, a, b) for k, a, b in segs]
    return [(k, b, a) for k, a, b in segs]


@dataclass(frozen=True)
class FlowResult:
    end: TorusPoint
    samples: tuple  # ((Dyadic time, TorusPoint), ...) in visiting order

    def to_path(self) -> Path:
        ordered = sorted(self.samples, key=lambda s: s[0])
        return Path([float(t) for t, _ in ordered], [p.to_floats() for _, p in ordered])


def flow(p, q: FlowQuery, max_stage_depth: int = DEFAULT_MAX_DEPTH) -> FlowResult:
    """Exact flow from ``q.t_start`` to ``q.t_end``, sampled at every stage boundary crossed."""
    p = TorusPoint.of(p)
    segs = stage_segments(q.t_start, q.t_end)
    if segs and max(k for k, _, _ in segs) > max_stage_depth:
        raise FlowDepthError(
            f"query reaches stage {max(k for k, _, _ in segs)} > max_stage_depth={max_stage_depth}; raise the depth"
        )
    samples = [(q.t_start, p)]
    for k, a, b in segs:
        p = stage_flow_exact(p, k, b - a)
        samples.append((b, p))
    return FlowResult(p, tuple(samples))


def flow_points(points, t_start, t_end, max_stage_depth: int = DEFAULT_MAX_DEPTH) -> np.ndarray:
    """Vectorised float flow between two dyadic times."""
    pts = np.asarray(points, dtype=float)
    segs = stage_segments(t_start, t_end)
    if segs and max(k for k, _, _ in segs) > max_stage_depth:
        raise FlowDepthError(f"query exceeds max_stage_depth={max_stage_depth}")
    for k, a, b in segs:
        pts = stage_map_points(pts, k, float(b - a))
    return pts


def flow_to_stage_end(points, t, direction: int = 1) -> np.ndarray:
    """Flow float points from arbitrary times ``t`` (array) to the end of their stage.

    ``direction=+1`` moves to the stage's upper time ``2**-k``; ``-1`` to
    its lower time ``2**-k-1``.  Used to evaluate transported densities at
    non-dyadic times.
    """
    pts = np.asarray(points, dtype=float)
    t = np.asarray(t, dtype=float)
    mant, ex = np.frexp(t)
    k = (-ex + (mant == 0.5)).astype(np.int64)
    out = pts.copy()
    for stage in np.unique(k):
        sel = k == stage
        target = 2.0**-stage if direction > 0 else 2.0 ** -(stage + 1)
        dts = target - t[sel]
        out[sel] = _stage_map_varying(pts[sel], int(stage), dts)
    return out


def _stage_map_varying(points, stage, dts):
    # per-point durations: same ring arithmetic with an array of dt
    scale = 2.0**stage
    y = points * scale
    c = np.floor(y + 0.5)
    rel = y - c
    a, b = rel[:, 0], rel[:, 1]
    r = np.maximum(np.abs(a), np.abs(b))
    moving = ((c[:, 0] + c[:, 1]) % 2 == 0) & (r > 0) & (r < 0.5)
    right = (a == r) & (b < r)
    top = ~right & (b == r) & (a > -r)
    left = ~right & ~top & (a == -r) & (b > -r)
    s = np.where(right, b + r, np.where(top, 3 * r - a, np.where(left, 5 * r - b, 7 * r + a)))
    per = 8.0 * r
    s = np.mod(s + 4.0 * r * (dts * scale), np.where(per > 0, per, 1.0))
    na = np.where(s < 2 * r, r, np.where(s < 4 * r, 3 * r - s, np.where(s < 6 * r, -r, s - 7 * r)))
    nb = np.where(s < 2 * r, s - r, np.where(s < 4 * r, r, np.where(s < 6 * r, 5 * r - s, -r)))
    newp = np.stack([(na + c[:, 0]) / scale, (nb + c[:, 1]) / scale], axis=1)
    return np.where(moving[:, None], np.mod(newp, TORUS_PERIOD), points)


def trajectory_points(points, times, max_stage_depth: int = DEFAULT_MAX_DEPTH) -> np.ndarray:
    """Positions at each of ``times`` (monotone, dyadic) starting from ``times[0]``.

    Stage-boundary positions are produced by full-stage maps only, so with
    grid starts they are exact; interior samples branch off the last
    boundary position and never feed back.
    """
    pts = np.asarray(points, dtype=float)
    times = [Dyadic.of(t) for t in times]
    out = np.empty((len(pts), len(times), 2))
    out[:, 0] = pts
    anchor_t, anchor = times[0], pts
    for j in range(1, len(times)):
        t = times[j]
        for k, a, b in stage_segments(anchor_t, t):
            if k > max_stage_depth:
                raise FlowDepthError(f"query exceeds max_stage_depth={max_stage_depth}")
            if b not in (Dyadic(1, k), Dyadic(1, k + 1)):
                break
            anchor = stage_map_points(anchor, k, float(b - a))
            anchor_t = b
        out[:, j] = anchor if anchor_t == t else flow_points(anchor, anchor_t, t, max_stage_depth)
    return out
