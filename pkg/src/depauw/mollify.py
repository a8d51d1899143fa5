"""Divergence-free smoothing of the staged field by mollifying stream functions.

The stage-``k`` stream function is ``H_k(x) = 2**-k H(2**k x)``, so its
convolution with a radial bump of radius ``eps`` is the rescaled unit-stage
convolution at radius ``2**k eps``.  Unit-stage tables of ``H * phi`` are
computed on a periodic grid of spacing ``h`` and interpolated with a cubic
spline; the velocity is the perpendicular gradient of that single scalar
spline, hence divergence-free identically.

Quadrature.  ``H`` is piecewise quadratic with kinks on the lines
``x_i in Z + 1/2`` and ``x1 +- x2 in 2Z``.  For a node ``x`` the integral is
done in polar coordinates around ``x``: the angular integral over each
circle is exact (arcs between line crossings, closed-form trigonometric
moments), and the radial integral uses Gauss-Legendre panels split at the
distances from ``x`` to the kink lines and their crossings, with a square
substitution absorbing the tangency singularity at each panel start.

Stream-table file layout (little-endian)::

    magic   8 bytes  b"DPWSTRM1"
    eps     float64  physical mollifier radius
    stage   int32
    h       float64  physical grid spacing
    nx, ny  int32    grid shape
    values  nx*ny float64, row-major; entry (i, j) is the unit-stage
            smoothed stream function at (i, j) * (2**stage * h)
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FsPath

import numpy as np
from scipy import integrate
from scipy.interpolate import RectBivariateSpline

from .field import FieldDomainError, is_filled, perp_grad, square_centers, stage_index, unit_stream

STREAM_MAGIC = b"DPWSTRM1"
_PERIOD = 2.0
_PAD = 24  # periodic padding; spline end effects decay ~0.27 per node


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass(frozen=True)
class Mollifier:
    """Radial ``C^inf`` bump ``C exp(-1/(1-|x/eps|^2))`` of unit mass."""

    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("mollifier radius must be positive")

    @cached_property
    def _unit_mass(self) -> float:
        val, _ = integrate.quad(lambda s: 2 * math.pi * s * float(_bump(s)), 0, 1, epsabs=1e-14, epsrel=1e-14)
        return val

    def radial(self, rho) -> np.ndarray:
        """Profile value at radius ``rho`` (density per unit area)."""
        return _bump(np.asarray(rho) / self.eps) / (self._unit_mass * self.eps**2)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.radial(np.hypot(x[..., 0], x[..., 1]))

    def mass(self) -> float:
        val, _ = integrate.quad(lambda r: 2 * math.pi * r * float(self.radial(r)), 0, self.eps, epsabs=1e-14)
        return val

    @cached_property
    def coordinate_variance(self) -> float:
        """``int y1**2 phi(y) dy``."""
        val, _ = integrate.quad(lambda r: math.pi * r**3 * float(self.radial(r)), 0, self.eps, epsabs=1e-16, epsrel=1e-13)
        return val


# -- exact-angle polar quadrature -------------------------------------------------

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss(n):
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = ((x + 1) / 2, w / 2)
    return _GL_CACHE[n]


def _nearest_lines(x):
    v1 = np.floor(x[:, 0]) + 0.5
    v2 = np.floor(x[:, 1]) + 0.5
    d1 = 2.0 * np.round((x[:, 0] - x[:, 1]) / 2)
    d2 = 2.0 * np.round((x[:, 0] + x[:, 1]) / 2)
    return v1, v2, d1, d2


def _line_distances(x, v1, v2, d1, d2):
    return np.stack(
        [
            np.abs(x[:, 0] - v1),
            np.abs(x[:, 1] - v2),
            np.abs(x[:, 0] - x[:, 1] - d1) / math.sqrt(2),
            np.abs(x[:, 0] + x[:, 1] - d2) / math.sqrt(2),
        ],
        axis=1,
    )


def _vertex_distances(x, v1, v2, d1, d2):
    verts = [
        (v1, v2),
        (v1, v1 - d1),
        (v1, d2 - v1),
        (v2 + d1, v2),
        (d2 - v2, v2),
        ((d1 + d2) / 2, (d2 - d1) / 2),
    ]
    return np.stack([np.hypot(x[:, 0] - a, x[:, 1] - b) for a, b in verts], axis=1)


def _circle_integral(x, rho, v1, v2, d1, d2):
    """``int_0^{2pi} H(x + rho e_theta) dtheta`` for arrays of shape (M, R)."""
    X1, X2 = x[:, 0:1], x[:, 1:2]
    V1, V2, D1, D2 = v1[:, None], v2[:, None], d1[:, None], d2[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        cv = (V1 - X1) / rho
        sh = (V2 - X2) / rho
        cd = (D1 - (X1 - X2)) / (math.sqrt(2) * rho)
        ca = (D2 - (X1 + X2)) / (math.sqrt(2) * rho)
        av = np.arccos(cv)
        ah = np.arcsin(sh)
        ad = np.arccos(cd)
        aa = np.arccos(ca)
    q = math.pi / 4
    ang = np.stack(
        [av, -av, ah, math.pi - ah, -q + ad, -q - ad, q + aa, q - aa],
        axis=-1,
    )
    ang = np.where(np.isnan(ang), 0.0, np.mod(ang, 2 * math.pi))
    M, R = rho.shape
    ang = np.concatenate([np.zeros((M, R, 1)), ang, np.full((M, R, 1), 2 * math.pi)], axis=-1)
    ang.sort(axis=-1)
    ta, tb = ang[..., :-1], ang[..., 1:]
    dth = tb - ta
    tm = 0.5 * (ta + tb)
    r3 = rho[..., None]
    q1 = X1[..., None] + r3 * np.cos(tm)
    q2 = X2[..., None] + r3 * np.sin(tm)
    c1 = np.floor(q1 + 0.5)
    c2 = np.floor(q2 + 0.5)
    rel1, rel2 = q1 - c1, q2 - c2
    filled = (c1 + c2) % 2 == 0
    vert = filled & (np.abs(rel1) >= np.abs(rel2))
    horiz = filled & ~vert
    A = X1[..., None] - c1
    B = X2[..., None] - c2
    ds = np.sin(tb) - np.sin(ta)
    dc = np.cos(tb) - np.cos(ta)
    ds2 = np.sin(2 * tb) - np.sin(2 * ta)
    i_vert = 2 * (A * A * dth + 2 * A * r3 * ds + r3 * r3 * (dth / 2 + ds2 / 4))
    i_horiz = 2 * (B * B * dth - 2 * B * r3 * dc + r3 * r3 * (dth / 2 - ds2 / 4))
    arc = np.where(vert, i_vert, np.where(horiz, i_horiz, 0.5 * dth))
    return arc.sum(axis=-1)


def mollified_unit_stream(points, eps: float, n_gauss: int = 64, chunk: int = 256) -> np.ndarray:
    """``(H * phi_eps)`` at unit-stage points; requires ``eps <= 1/8``."""
    if not 0 < eps <= 0.125:
        raise ValueError("unit-stage mollifier radius must lie in (0, 1/8]")
    x = np.atleast_2d(np.asarray(points, dtype=float))
    moll = Mollifier(eps)
    v1, v2, d1, d2 = _nearest_lines(x)
    dist = _line_distances(x, v1, v2, d1, d2)
    far = np.all(dist >= eps, axis=1)
    out = np.empty(len(x))
    # a ball inside one quadratic piece: H * phi = H + 2 var on filled pieces
    hx = unit_stream(x[far])
    filled_far = is_filled(square_centers(x[far]))
    out[far] = hx + np.where(filled_far, 2.0 * moll.coordinate_variance, 0.0)
    near = np.flatnonzero(~far)
    gs, gw = _gauss(n_gauss)
    for lo in range(0, len(near), chunk):
        idx = near[lo : lo + chunk]
        xs = x[idx]
        a1, a2, b1, b2 = v1[idx], v2[idx], d1[idx], d2[idx]
        brk = np.concatenate([dist[idx], _vertex_distances(xs, a1, a2, b1, b2)], axis=1)
        brk = np.minimum(brk, eps)
        brk = np.concatenate([np.zeros((len(idx), 1)), brk, np.full((len(idx), 1), eps)], axis=1)
        brk.sort(axis=1)
        a, b = brk[:, :-1, None], brk[:, 1:, None]
        rho = a + (b - a) * gs**2  # (M, panels, n_gauss)
        wts = (b - a) * 2 * gs * gw
        rho = rho.reshape(len(idx), -1)
        wts = wts.reshape(len(idx), -1)
        safe = np.where(rho > 0, rho, eps * 1e-9)
        circ = _circle_integral(xs, safe, a1, a2, b1, b2)
        out[idx] = np.sum(wts * moll.radial(rho) * rho * circ, axis=1)
    return out


# -- tables -------------------------------------------------------------------------

def _octant_fold(i, n):
    """Fold grid indices onto the fundamental triangle using the square's symmetries."""
    i = np.mod(i, n)
    return np.minimum(i, n - i)


def unit_stream_table(eps_unit: float, h_unit: float, **kw) -> np.ndarray:
    """Smoothed unit-stage stream function on the periodic grid ``(i h, j h)`` of [0, 2)^2.

    Only the triangle ``0 <= x2 <= x1 <= 1`` is computed; the rest follows
    from the reflections ``x_i -> -x_i``, the swap ``x1 <-> x2`` and the
    period 2, all symmetries of ``H`` and of the radial bump.
    """
    n = int(round(_PERIOD / h_unit))
    if not math.isclose(n * h_unit, _PERIOD, rel_tol=0, abs_tol=1e-12) or n % 2:
        raise ValueError("grid spacing must divide the period into an even number of cells")
    half = n // 2
    ii, jj = np.meshgrid(np.arange(half + 1), np.arange(half + 1), indexing="ij")
    tri = jj <= ii
    ti, tj = ii[tri], jj[tri]
    vals = mollified_unit_stream(np.stack([ti * h_unit, tj * h_unit], axis=1), eps_unit, **kw)
    octant = np.zeros((half + 1, half + 1))
    octant[ti, tj] = vals
    octant[tj, ti] = vals
    gi = _octant_fold(np.arange(n), n)
    return octant[np.ix_(gi, gi)]


def save_stream_table(path, values: np.ndarray, eps: float, stage: int, h: float) -> None:
    nx, ny = values.shape
    with open(path, "wb") as fh:
        fh.write(STREAM_MAGIC)
        fh.write(struct.pack("<didii", eps, stage, h, nx, ny))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_stream_table(path):
    """Returns ``(values, eps, stage, h)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != STREAM_MAGIC:
            raise ValueError(f"{path}: not a stream table")
        eps, stage, h, nx, ny = struct.unpack("<didii", fh.read(28))
        values = np.frombuffer(fh.read(8 * nx * ny), dtype="<f8").reshape(nx, ny).copy()
    return values, eps, stage, h


def admissible_depth(eps: float) -> int:
    """Deepest stage ``k`` with ``2**-k >= 8 eps`` (-1 if none)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return math.floor(math.log2(1.0 / (8.0 * eps)) + 1e-12)


@dataclass
class StreamSlice:
    """One stage of a mollified field: spline of the unit-stage smoothed stream function."""

    eps: float
    stage: int
    h: float
    values: np.ndarray

    @cached_property
    def spline(self) -> RectBivariateSpline:
        n = self.values.shape[0]
        hu = self.h * 2.0**self.stage
        idx = np.arange(-_PAD, n + _PAD)
        grid = idx * hu
        ext = self.values[np.ix_(np.mod(idx, n), np.mod(idx, n))]
        return RectBivariateSpline(grid, grid, ext, kx=3, ky=3, s=0)

    def stream(self, points) -> np.ndarray:
        y = np.mod(np.asarray(points, dtype=float) * 2.0**self.stage, _PERIOD)
        return 2.0**-self.stage * self.spline.ev(y[..., 0], y[..., 1])

    def velocity(self, points) -> np.ndarray:
        y = np.mod(np.asarray(points, dtype=float) * 2.0**self.stage, _PERIOD)
        g = np.stack([self.spline.ev(y[..., 0], y[..., 1], dx=1), self.spline.ev(y[..., 0], y[..., 1], dy=1)], axis=-1)
        return perp_grad(g)


def build_mollified(eps: float, stage: int, h: float | None = None, cache_dir=None) -> StreamSlice:
    """Stage slice of the mollified field; ``h`` defaults to ``eps / 8``."""
    if h is None:
        h = eps / 8
    if not 0 < h <= eps / 8 * (1 + 1e-12):
        raise ValueError(f"grid spacing h={h} too coarse for eps={eps}; need h <= eps/8")
    if not eps < 0.25:
        raise ValueError("eps must be < 1/4")
    if stage > admissible_depth(eps):
        raise FieldDomainError(f"stage {stage} too deep for eps={eps}; admissible stages are 0..{admissible_depth(eps)}")
    cache = None
    if cache_dir is not None:
        cache = FsPath(cache_dir) / f"stream_eps{eps!r}_k{stage}_h{h!r}.bin"
        if cache.exists():
            values, e2, k2, h2 = load_stream_table(cache)
            if (e2, k2, h2) == (eps, stage, h):
                return StreamSlice(eps, stage, h, values)
    scale = 2.0**stage
    values = unit_stream_table(eps * scale, h * scale)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_stream_table(cache, values, eps, stage, h)
    return StreamSlice(eps, stage, h, values)


@dataclass
class MollifiedField:
    """Spatially mollified staged field; defined on admissible stages only."""

    eps: float
    h: float | None = None
    cache_dir: object = None
    max_stage: int | None = None
    slices: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.h is None:
            self.h = self.eps / 8
        adm = admissible_depth(self.eps)
        self.max_stage = adm if self.max_stage is None else min(self.max_stage, adm)

    def slice(self, stage: int) -> StreamSlice:
        if stage < 0 or stage > self.max_stage:
            raise FieldDomainError(
                f"stage {stage} too deep for eps={self.eps}; admissible stages are 0..{self.max_stage}"
            )
        if stage not in self.slices:
            self.slices[stage] = build_mollified(self.eps, stage, self.h, self.cache_dir)
        return self.slices[stage]

    def velocity(self, stage: int, points) -> np.ndarray:
        return self.slice(stage).velocity(points)

    def stream(self, stage: int, points) -> np.ndarray:
        return self.slice(stage).stream(points)

    def __call__(self, t, points) -> np.ndarray:
        return self.velocity(stage_index(t), points)

    def admits(self, stage: int) -> bool:
        return 0 <= stage <= self.max_stage

    def describe(self) -> dict:
        return {"kind": "mollified", "eps": self.eps, "h": self.h, "max_stage": self.max_stage}


def eval_mollified(f: MollifiedField, t, p) -> np.ndarray:
    """Velocity of the mollified field at time ``t``; errors on inadmissible stages."""
    return f(t, np.asarray(p, dtype=float))
