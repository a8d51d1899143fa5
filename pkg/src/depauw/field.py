"""The rotor field w, its periodisation u, the staged field b and stream functions.

Geometry on the unit stage: the squares of side 1 centred at integer points
``n`` tile the plane.  A square is *filled* when ``n1 + n2`` is even (``n``
in the even lattice) and carries ``w(x - n)``; otherwise it is *empty* and
the field vanishes.  Stage ``k`` (times in ``(2**-k-1, 2**-k]``) uses
``u(2**k x)`` with no amplitude rescaling.

The velocity is zero on the diagonals ``|x1| = |x2|`` and on square
boundaries; both sets are Lebesgue-null.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dyadic import Dyadic, TorusPoint

SUP_NORM = 2.0

# piece labels inside a unit square
ZERO_PIECE = 0
VERTICAL_PIECE = 1  # |y1| > |y2|: velocity (0, 4 y1)
HORIZONTAL_PIECE = 2  # |y2| > |y1|: velocity (-4 y2, 0)


class FieldDomainError(ValueError):
    """Raised when the staged field is queried at a time where it is undefined."""


def _as_points(p) -> np.ndarray:
    if isinstance(p, TorusPoint):
        return np.array(p.to_floats())
    return np.asarray(p, dtype=float)


# -- stage schedule ----------------------------------------------------------

def stage_index(t) -> int:
    """Stage ``k`` with ``2**-k-1 < t <= 2**-k``; exact for dyadic and float times."""
    if isinstance(t, Dyadic):
        if t <= 0 or t > 1:
            raise FieldDomainError(f"time {t} outside (0, 1]")
        # t = m / 2^e with m odd (or t = 1): k = floor(log2(1/t))
        m, e = t.mantissa, t.exponent
        return e - m.bit_length() + (1 if m & (m - 1) == 0 else 0)
    t = float(t)
    if not (0.0 < t <= 1.0):
        raise FieldDomainError(f"time {t} outside (0, 1]")
    mant, ex = math.frexp(t)
    return -ex + (1 if mant == 0.5 else 0)


def stage_indices(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any((t <= 0) | (t > 1)):
        raise FieldDomainError("times must lie in (0, 1]")
    mant, ex = np.frexp(t)
    return (-ex + (mant == 0.5)).astype(np.int64)


def stage_interval(k: int) -> tuple[Dyadic, Dyadic]:
    """Half-open time interval ``(2**-k-1, 2**-k]`` of stage ``k``."""
    return Dyadic(1, k + 1), Dyadic(1, k)


# -- unit-stage geometry -----------------------------------------------------

def square_centers(y: np.ndarray) -> np.ndarray:
    """Integer centre of the unit square containing each point (half-open)."""
    return np.floor(y + 0.5)


def is_filled(centers: np.ndarray) -> np.ndarray:
    return (centers[..., 0] + centers[..., 1]) % 2 == 0


def w_velocity(rel) -> np.ndarray:
    """Rotor field ``w`` at positions relative to a filled-square centre."""
    rel = np.asarray(rel, dtype=float)
    a1, a2 = np.abs(rel[..., 0]), np.abs(rel[..., 1])
    v = np.zeros_like(rel)
    vert = (a1 < 0.5) & (a1 > a2)
    horiz = (a2 < 0.5) & (a2 > a1)
    v[..., 1] = np.where(vert, 4.0 * rel[..., 0], 0.0)
    v[..., 0] = np.where(horiz, -4.0 * rel[..., 1], 0.0)
    return v


def u_velocity(y) -> np.ndarray:
    """Periodised field ``u`` (only the containing square contributes)."""
    y = np.asarray(y, dtype=float)
    c = square_centers(y)
    v = w_velocity(y - c)
    v[~is_filled(c)] = 0.0
    return v


def u_pieces(y) -> tuple[np.ndarray, np.ndarray]:
    """Label the affine piece of ``u`` containing each point.

    Returns ``(centers, label)``; inside a piece ``u`` is affine, so the
    piece formula can be extended past the piece boundary.
    """
    y = np.asarray(y, dtype=float)
    c = square_centers(y)
    rel = y - c
    a1, a2 = np.abs(rel[..., 0]), np.abs(rel[..., 1])
    label = np.full(a1.shape, ZERO_PIECE, dtype=np.int8)
    filled = is_filled(c)
    label[filled & (a1 < 0.5) & (a1 > a2)] = VERTICAL_PIECE
    label[filled & (a2 < 0.5) & (a2 > a1)] = HORIZONTAL_PIECE
    return c, label


def u_velocity_pieces(y):
    """``u`` together with its piece labels, sharing one pass over the points."""
    y = np.asarray(y, dtype=float)
    c = np.floor(y + 0.5)
    rel = y - c
    a1, a2 = np.abs(rel[..., 0]), np.abs(rel[..., 1])
    filled = (c[..., 0] + c[..., 1]) % 2 == 0
    vert = filled & (a1 < 0.5) & (a1 > a2)
    horiz = filled & (a2 < 0.5) & (a2 > a1)
    v = np.empty_like(y)
    v[..., 0] = np.where(horiz, -4.0 * rel[..., 1], 0.0)
    v[..., 1] = np.where(vert, 4.0 * rel[..., 0], 0.0)
    label = vert.astype(np.int8) + 2 * horiz.astype(np.int8)
    return v, c, label


def piece_velocity(y, centers, label) -> np.ndarray:
    """Affine extension of the piece formula of ``u``."""
    rel = np.asarray(y, dtype=float) - centers
    v = np.zeros_like(rel)
    v[..., 1] = np.where(label == VERTICAL_PIECE, 4.0 * rel[..., 0], 0.0)
    v[..., 0] = np.where(label == HORIZONTAL_PIECE, -4.0 * rel[..., 1], 0.0)
    return v


def unit_stream(y) -> np.ndarray:
    """Stream function of ``u``: ``2 min(max|y - n|, 1/2)**2`` on filled squares, 1/2 elsewhere."""
    y = np.asarray(y, dtype=float)
    c = square_centers(y)
    r = np.max(np.abs(y - c), axis=-1)
    h = 2.0 * np.minimum(r, 0.5) ** 2
    return np.where(is_filled(c), h, 0.5)


# -- scalar API --------------------------------------------------------------

def eval_w(p) -> tuple[float, float]:
    v = w_velocity(_as_points(p))
    return float(v[0]), float(v[1])


def eval_u(p) -> tuple[float, float]:
    v = u_velocity(_as_points(p))
    return float(v[0]), float(v[1])


def eval_b(t, p) -> tuple[float, float]:
    k = stage_index(t)
    v = u_velocity(_as_points(p) * 2.0**k)
    return float(v[0]), float(v[1])


def eval_b_truncated(tau, t, p) -> tuple[float, float]:
    """Field switched off before ``tau``: zero for ``t < tau``, else ``b(t, p)``."""
    if float(tau) <= 0:
        raise FieldDomainError("truncation time must be positive")
    if float(t) < float(tau):
        return 0.0, 0.0
    return eval_b(t, p)


def eval_stream(stage: int, p) -> float:
    """``H_k(p) = 2**-k H(2**k p)``; its perpendicular gradient is the stage-k field."""
    return float(2.0**-stage * unit_stream(_as_points(p) * 2.0**stage))


def perp_grad(grad: np.ndarray) -> np.ndarray:
    """``(-d2, d1)``: maps a stream-function gradient to its velocity."""
    out = np.empty_like(grad)
    out[..., 0] = -grad[..., 1]
    out[..., 1] = grad[..., 0]
    return out


@dataclass(frozen=True)
class DepauwField:
    """The staged Depauw field with a bound on the stage depth used by exact flows."""

    max_stage_depth: int = 30
    sup_norm: float = SUP_NORM

    def velocity(self, stage: int, points) -> np.ndarray:
        """Field of stage ``stage`` at float points of shape ``(N, 2)``."""
        return u_velocity(np.asarray(points, dtype=float) * 2.0**stage)

    def __call__(self, t, points) -> np.ndarray:
        return self.velocity(stage_index(t), points)

    def pieces(self, stage: int, points):
        return u_pieces(np.asarray(points, dtype=float) * 2.0**stage)

    def velocity_pieces(self, stage: int, points):
        """``(velocity, centers, label)`` at stage ``stage``."""
        return u_velocity_pieces(np.asarray(points, dtype=float) * 2.0**stage)

    def piece_velocity(self, stage: int, points, pieces) -> np.ndarray:
        centers, label = pieces
        return piece_velocity(np.asarray(points, dtype=float) * 2.0**stage, centers, label)

    def stream(self, stage: int, points) -> np.ndarray:
        return 2.0**-stage * unit_stream(np.asarray(points, dtype=float) * 2.0**stage)

    def admits(self, stage: int) -> bool:
        return 0 <= stage

    def describe(self) -> dict:
        return {"kind": "exact", "max_stage_depth": self.max_stage_depth}
