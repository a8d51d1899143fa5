"""Exact dyadic arithmetic, the period-2 torus and dyadic cell indexing.

All values here are immutable.  A ``Dyadic`` is ``mantissa / 2**exponent``
with an arbitrary precision integer mantissa, so sums, differences,
products and multiplication by powers of two never round.

Growth bound: the stage maps only shift coordinates by ``2**k`` and add
dyadics whose exponent is at most ``exponent(start) + k + 2``, so after
crossing stages ``0..K`` every coordinate has exponent at most
``exponent(start) + K + 2``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from numbers import Integral, Rational

import numpy as np

TORUS_PERIOD = 2


@dataclass(frozen=True, order=False)
class Dyadic:
    mantissa: int
    exponent: int = 0

    def __post_init__(self):
        m, e = int(self.mantissa), int(self.exponent)
        if e < 0:
            m, e = m << -e, 0
        if m == 0:
            e = 0
        else:
            # strip common powers of two
            tz = (m & -m).bit_length() - 1
            shift = min(tz, e)
            m >>= shift
            e -= shift
        object.__setattr__(self, "mantissa", m)
        object.__setattr__(self, "exponent", e)

    # -- construction -----------------------------------------------------
    @classmethod
    def of(cls, value) -> "Dyadic":
        """Convert an int, float, Fraction, Dyadic or string exactly."""
        if isinstance(value, Dyadic):
            return value
        if isinstance(value, bool):
            raise TypeError("bool is not a dyadic")
        if isinstance(value, Integral):
            return cls(int(value), 0)
        if isinstance(value, (float, np.floating)):
            if not math.isfinite(value):
                raise ValueError(f"non-finite value {value!r}")
            return cls.of(Fraction(float(value)))
        if isinstance(value, Rational):
            num, den = value.numerator, value.denominator
            if den & (den - 1):
                raise ValueError(f"{value} is not a dyadic rational")
            return cls(num, den.bit_length() - 1)
        if isinstance(value, str):
            return cls.parse(value)
        raise TypeError(f"cannot convert {type(value).__name__} to Dyadic")

    @classmethod
    def parse(cls, text: str) -> "Dyadic":
        """Parse ``"m/2^e"``, ``"m/N"`` (N a power of two), or a decimal."""
        s = text.strip()
        m = re.fullmatch(r"([+-]?\d+)\s*/\s*2\^(\d+)", s)
        if m:
            return cls(int(m.group(1)), int(m.group(2)))
        try:
            return cls.of(Fraction(s))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a dyadic literal: {text!r}") from exc

    # -- conversions ------------------------------------------------------
    def to_fraction(self) -> Fraction:
        return Fraction(self.mantissa, 1 << self.exponent)

    def __float__(self) -> float:
        return self.mantissa / (1 << self.exponent) if self.exponent < 1000 else float(self.to_fraction())

    def __str__(self) -> str:
        return f"{self.mantissa}/2^{self.exponent}"

    def __repr__(self) -> str:
        return f"Dyadic({self.mantissa}, {self.exponent})"

    def to_decimal(self) -> str:
        """Exact decimal expansion (always terminating for dyadics)."""
        m, e = self.mantissa, self.exponent
        if e == 0:
            return str(m)
        digits = str(abs(m) * 5**e).rjust(e + 1, "0")
        sign = "-" if m < 0 else ""
        return f"{sign}{digits[:-e]}.{digits[-e:]}"

    # -- arithmetic -------------------------------------------------------
    def _align(self, other):
        other = Dyadic.of(other)
        e = max(self.exponent, other.exponent)
        return self.mantissa << (e - self.exponent), other.mantissa << (e - other.exponent), e

    def __add__(self, other):
        a, b, e = self._align(other)
        return Dyadic(a + b, e)

    __radd__ = __add__

    def __sub__(self, other):
        a, b, e = self._align(other)
        return Dyadic(a - b, e)

    def __rsub__(self, other):
        return Dyadic.of(other) - self

    def __mul__(self, other):
        other = Dyadic.of(other)
        return Dyadic(self.mantissa * other.mantissa, self.exponent + other.exponent)

    __rmul__ = __mul__

    def __neg__(self):
        return Dyadic(-self.mantissa, self.exponent)

    def __abs__(self):
        return Dyadic(abs(self.mantissa), self.exponent)

    def scale2(self, k: int) -> "Dyadic":
        """Multiply by ``2**k`` (k may be negative)."""
        return Dyadic(self.mantissa, self.exponent - k)

    def half(self) -> "Dyadic":
        return self.scale2(-1)

    def double(self) -> "Dyadic":
        return self.scale2(1)

    def floor(self) -> int:
        return self.mantissa >> self.exponent

    def __floor__(self) -> int:
        return self.floor()

    def mod(self, period: int) -> "Dyadic":
        q = period << self.exponent
        return Dyadic(self.mantissa % q, self.exponent)

    # -- comparison -------------------------------------------------------
    def _cmp(self, other) -> int:
        try:
            a, b, _ = self._align(other)
        except (TypeError, ValueError):
            return NotImplemented
        return (a > b) - (a < b)

    def __eq__(self, other):
        if isinstance(other, Dyadic):
            return self.mantissa == other.mantissa and self.exponent == other.exponent
        try:
            return self == Dyadic.of(other)
        except (TypeError, ValueError):
            return NotImplemented

    def __hash__(self):
        return hash((self.mantissa, self.exponent))

    def __lt__(self, other):
        return self._cmp(other) < 0

    def __le__(self, other):
        return self._cmp(other) <= 0

    def __gt__(self, other):
        return self._cmp(other) > 0

    def __ge__(self, other):
        return self._cmp(other) >= 0

    def __bool__(self):
        return self.mantissa != 0


ZERO = Dyadic(0)
ONE = Dyadic(1)
HALF = Dyadic(1, 1)


@dataclass(frozen=True)
class TorusPoint:
    """A point of the period-2 torus [0, 2)^2 with exact coordinates."""

    x1: Dyadic
    x2: Dyadic

    def __post_init__(self):
        object.__setattr__(self, "x1", Dyadic.of(self.x1).mod(TORUS_PERIOD))
        object.__setattr__(self, "x2", Dyadic.of(self.x2).mod(TORUS_PERIOD))

    @classmethod
    def of(cls, p) -> "TorusPoint":
        if isinstance(p, TorusPoint):
            return p
        a, b = p
        return cls(Dyadic.of(a), Dyadic.of(b))

    def __iter__(self):
        yield self.x1
        yield self.x2

    def to_floats(self) -> tuple[float, float]:
        return float(self.x1), float(self.x2)

    def translate(self, d1, d2) -> "TorusPoint":
        return TorusPoint(self.x1 + Dyadic.of(d1), self.x2 + Dyadic.of(d2))

    def to_json(self) -> list[str]:
        return [str(self.x1), str(self.x2)]

    @classmethod
    def from_json(cls, pair) -> "TorusPoint":
        return cls(Dyadic.of(pair[0]), Dyadic.of(pair[1]))


@dataclass(frozen=True)
class Cell:
    """Square ``[ix, ix+1) x [iy, iy+1)`` scaled by ``2**-level`` on the torus."""

    level: int
    ix: int
    iy: int

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("cell level must be >= 0")
        n = 1 << (self.level + 1)
        object.__setattr__(self, "ix", self.ix % n)
        object.__setattr__(self, "iy", self.iy % n)

    @property
    def side(self) -> Dyadic:
        return Dyadic(1, self.level)

    def lower_left(self) -> TorusPoint:
        return TorusPoint(Dyadic(self.ix, self.level), Dyadic(self.iy, self.level))

    def center(self) -> TorusPoint:
        return TorusPoint(Dyadic(2 * self.ix + 1, self.level + 1), Dyadic(2 * self.iy + 1, self.level + 1))

    def contains(self, p: TorusPoint) -> bool:
        return cell_of(p, self.level) == self

    def children(self) -> list["Cell"]:
        k = self.level + 1
        return [Cell(k, 2 * self.ix + a, 2 * self.iy + b) for a in (0, 1) for b in (0, 1)]

    def parent(self) -> "Cell":
        if self.level == 0:
            raise ValueError("level-0 cells have no parent")
        return Cell(self.level - 1, self.ix >> 1, self.iy >> 1)

    def flat_index(self) -> int:
        return self.ix * (1 << (self.level + 1)) + self.iy


def cells_per_side(level: int) -> int:
    return 1 << (level + 1)


@dataclass(frozen=True)
class Lattice:
    """``L1`` is ``2**-k Z^2``; ``L2`` is ``L1`` shifted by ``(2**-k-1, 2**-k-1)``."""

    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in ("L1", "L2"):
            raise ValueError(f"unknown lattice kind {self.kind!r}")

    @property
    def offset(self) -> Dyadic:
        return ZERO if self.kind == "L1" else Dyadic(1, self.level + 1)

    def contains(self, p: TorusPoint) -> bool:
        return all(((c - self.offset).scale2(self.level)).exponent == 0 for c in p)

    def points(self) -> list[TorusPoint]:
        """All lattice points on the period-2 torus."""
        n = cells_per_side(self.level)
        off = self.offset
        return [TorusPoint(Dyadic(i, self.level) + off, Dyadic(j, self.level) + off) for i in range(n) for j in range(n)]

    def dual(self) -> "Lattice":
        return Lattice("L2" if self.kind == "L1" else "L1", self.level)


def cell_of(p, level: int) -> Cell:
    if level < 0:
        raise ValueError("level must be >= 0")
    p = TorusPoint.of(p)
    return Cell(level, p.x1.scale2(level).floor(), p.x2.scale2(level).floor())


def checkerboard_value(c: Cell) -> int:
    """Level-``c.level`` checkerboard indicator; equals rho_bar(2**k x) on the cell."""
    return (c.ix + c.iy) & 1


def torus_delta(p, q) -> np.ndarray:
    """Shortest displacement ``q - p`` on the period-2 torus (vectorised)."""
    d = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
    return d - TORUS_PERIOD * np.round(d / TORUS_PERIOD)


def torus_distance(p, q):
    """Euclidean geodesic distance on the period-2 torus.

    Accepts ``TorusPoint`` instances or float arrays of shape ``(..., 2)``.
    """
    if isinstance(p, TorusPoint):
        p = p.to_floats()
    if isinstance(q, TorusPoint):
        q = q.to_floats()
    d = torus_delta(p, q)
    out = np.sqrt(np.sum(d * d, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def cell_indices(points, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``cell_of`` for float points of shape ``(N, 2)``."""
    pts = np.mod(np.asarray(points, dtype=float), TORUS_PERIOD)
    n = cells_per_side(level)
    idx = np.floor(pts * (1 << level)).astype(np.int64)
    np.clip(idx, 0, n - 1, out=idx)
    return idx[..., 0], idx[..., 1]
