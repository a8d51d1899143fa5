import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from depauw.dyadic import (
    Cell,
    Dyadic,
    Lattice,
    TorusPoint,
    cell_indices,
    cell_of,
    checkerboard_value,
    torus_distance,
)

dyadics = st.builds(Dyadic, st.integers(-(10**12), 10**12), st.integers(0, 60))


def test_canonical_form():
    d = Dyadic(12, 4)
    assert (d.mantissa, d.exponent) == (3, 2)
    assert Dyadic(0, 9) == Dyadic(0, 0)
    assert Dyadic(3, -2) == Dyadic(12, 0)


@given(dyadics)
def test_mantissa_odd_when_fractional(d):
    assert d.exponent == 0 or d.mantissa % 2 == 1


@given(dyadics, dyadics)
def test_arithmetic_matches_fractions(a, b):
    fa, fb = a.to_fraction(), b.to_fraction()
    assert (a + b).to_fraction() == fa + fb
    assert (a - b).to_fraction() == fa - fb
    assert (a * b).to_fraction() == fa * fb
    assert ((a + b) - b) == a
    assert (a < b) == (fa < fb)


@given(dyadics, st.integers(-20, 20))
def test_scaling_is_exact(a, k):
    assert a.scale2(k).to_fraction() == a.to_fraction() * Fraction(2) ** k
    assert a.half().double() == a


@given(dyadics)
def test_string_roundtrip(a):
    assert Dyadic.parse(str(a)) == a
    assert Dyadic.parse(a.to_decimal()) == a


@pytest.mark.parametrize("text,value", [("3/8", Fraction(3, 8)), ("5/2^4", Fraction(5, 16)), ("0.375", Fraction(3, 8)),
                                        ("-1/2", Fraction(-1, 2)), ("2", Fraction(2))])
def test_parse(text, value):
    assert Dyadic.parse(text).to_fraction() == value


@pytest.mark.parametrize("bad", ["0.1", "1/3", "abc"])
def test_parse_rejects_non_dyadic(bad):
    with pytest.raises(ValueError):
        Dyadic.parse(bad)


def test_float_conversion_exact():
    assert Dyadic.of(0.3).to_fraction() == Fraction(0.3)
    assert float(Dyadic(3, 3)) == 0.375


@given(dyadics, dyadics)
def test_torus_point_reduced(a, b):
    p = TorusPoint(a, b)
    assert 0 <= p.x1 < 2 and 0 <= p.x2 < 2
    assert (p.x1 - a).to_fraction() % 2 == 0


def test_torus_point_json():
    p = TorusPoint.of(("3/4", "-1/8"))
    assert p.to_json() == ["3/2^2", "15/2^3"]
    assert TorusPoint.from_json(p.to_json()) == p


@pytest.mark.parametrize("p,level,cell", [((0.75, 0.25), 0, (0, 0, 0)), ((1.0, 0.0), 0, (0, 1, 0)),
                                          ((0.3, 1.7), 2, (2, 1, 6))])
def test_cell_of_examples(p, level, cell):
    assert cell_of(p, level) == Cell(*cell)


@given(dyadics, dyadics, st.integers(0, 12))
def test_cell_of_refines(a, b, k):
    p = TorusPoint(a, b)
    c = cell_of(p, k)
    child = cell_of(p, k + 1)
    assert child in c.children()
    assert child.parent() == c
    assert c.contains(p)


def test_cell_geometry():
    c = Cell(2, 9, -1)
    assert (c.ix, c.iy) == (1, 7)
    assert c.side == Dyadic(1, 2)
    assert c.center() == TorusPoint(Dyadic(3, 3), Dyadic(15, 3))
    assert c.flat_index() == 1 * 8 + 7
    with pytest.raises(ValueError):
        Cell(0, 0, 0).parent()


@pytest.mark.parametrize("cell,value", [((0, 0, 0), 0), ((0, 1, 0), 1), ((3, 5, 6), 1)])
def test_checkerboard_examples(cell, value):
    assert checkerboard_value(Cell(*cell)) == value


@given(st.integers(0, 3), st.integers(0, 3))
def test_checkerboard_flips_under_unit_translation(i, j):
    assert checkerboard_value(Cell(0, i + 1, j)) != checkerboard_value(Cell(0, i, j))
    assert checkerboard_value(Cell(0, i, j + 1)) != checkerboard_value(Cell(0, i, j))


def test_torus_distance_examples():
    assert torus_distance((0.5, 0.5), (0.5, 0.5)) == 0
    assert torus_distance((0.1, 0.0), (1.9, 0.0)) == pytest.approx(0.2)
    assert torus_distance((0.0, 0.0), (1.0, 1.0)) == pytest.approx(math.sqrt(2))
    assert torus_distance(TorusPoint.of((0, 0)), TorusPoint.of(("3/2", 0))) == 0.5


def test_torus_distance_vectorised():
    rng = np.random.default_rng(0)
    p, q = rng.uniform(0, 2, (100, 2)), rng.uniform(0, 2, (100, 2))
    d = torus_distance(p, q)
    # brute force over the nine lifts
    shifts = np.array([(a, b) for a in (-2, 0, 2) for b in (-2, 0, 2)])
    brute = np.min(np.linalg.norm(q[:, None, :] + shifts[None] - p[:, None, :], axis=2), axis=1)
    np.testing.assert_allclose(d, brute, rtol=0, atol=1e-15)


def test_cell_indices_matches_cell_of():
    rng = np.random.default_rng(1)
    pts = np.round(rng.uniform(0, 2, (200, 2)) * 2**20) / 2**20
    ix, iy = cell_indices(pts, 5)
    for p, a, b in zip(pts, ix, iy):
        c = cell_of(tuple(p), 5)
        assert (c.ix, c.iy) == (a, b)


def test_lattices():
    l1, l2 = Lattice("L1", 1), Lattice("L2", 1)
    assert l2.offset == Dyadic(1, 2)
    assert l1.dual() == l2
    assert len(l1.points()) == 16
    assert all(l2.contains(p) for p in l2.points())
    assert not l1.contains(TorusPoint.of(("1/4", "1/4")))
    with pytest.raises(ValueError):
        Lattice("L3", 0)
