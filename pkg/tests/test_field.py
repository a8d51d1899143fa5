import numpy as np
import pytest
from hypothesis import given, strategies as st

from depauw.dyadic import Dyadic
from depauw.field import (
    DepauwField,
    FieldDomainError,
    eval_b,
    eval_b_truncated,
    eval_stream,
    eval_u,
    eval_w,
    perp_grad,
    stage_index,
    stage_indices,
    u_velocity,
    unit_stream,
)

coord = st.integers(0, 2**41 - 1).map(lambda m: m * 2.0**-40)


def close(v, w):
    return np.allclose(v, w, atol=1e-12, rtol=0)


@pytest.mark.parametrize("p,v", [((0.3, 0.1), (0, 1.2)), ((0.1, -0.3), (1.2, 0)), ((0.7, 0.1), (0, 0)),
                                 ((0.2, 0.2), (0, 0))])
def test_w_examples(p, v):
    assert close(eval_w(p), v)


@pytest.mark.parametrize("p,v", [((1.3, 1.1), (0, 1.2)), ((1.3, 0.1), (0, 0)), ((0.0, 0.0), (0, 0))])
def test_u_examples(p, v):
    assert close(eval_u(p), v)


@pytest.mark.parametrize("t,p,v", [(0.75, (0.3, 0.1), (0, 1.2)), (0.3, (0.15, 0.05), (0, 1.2)),
                                   (0.75, (1.3, 0.1), (0, 0))])
def test_b_examples(t, p, v):
    assert close(eval_b(t, p), v)


def test_truncated_examples():
    assert eval_b_truncated(0.5, 0.3, (0.3, 0.1)) == (0, 0)
    assert close(eval_b_truncated(0.5, 0.75, (0.3, 0.1)), (0, 1.2))
    assert eval_b_truncated(0.5, 0.5, (0.3, 0.1)) == eval_b(0.5, (0.3, 0.1))
    with pytest.raises(FieldDomainError):
        eval_b_truncated(0, 0.5, (0, 0))


@pytest.mark.parametrize("p,h", [((0.3, 0.1), 0.18), ((0.0, 0.0), 0.0), ((0.7, 0.1), 0.5)])
def test_stream_examples(p, h):
    assert eval_stream(0, p) == pytest.approx(h, abs=1e-15)


@pytest.mark.parametrize("t,k", [(1, 0), (0.75, 0), (0.5, 1), (0.3, 1), (0.25, 2), (2.0**-20, 20),
                                 (Dyadic(3, 5), 3), (Dyadic(1, 7), 7)])
def test_stage_index(t, k):
    assert stage_index(t) == k
    if not isinstance(t, Dyadic):
        assert stage_indices([t])[0] == k


@pytest.mark.parametrize("t", [0, -0.5, 1.5, Dyadic(3, 1)])
def test_stage_index_domain(t):
    with pytest.raises(FieldDomainError):
        stage_index(t)


def test_sup_norm_is_two():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 2, (10**6, 2))
    f = DepauwField()
    sup = max(np.abs(f.velocity(k, pts)).max() for k in range(13))
    assert sup <= 2.0
    assert sup > 2.0 - 1e-4


def test_stream_gradient_matches_field():
    rng = np.random.default_rng(1)
    h = 1e-4
    pts = rng.uniform(0, 2, (10**4, 2))
    # stay away from the kinks of the piecewise-quadratic stream so central differences see one piece
    y = pts - np.floor(pts + 0.5)
    a = np.abs(y)
    keep = (np.abs(a[:, 0] - a[:, 1]) > 3 * h) & (np.abs(a - 0.5).min(axis=1) > 3 * h)
    pts = pts[keep]
    grad = np.empty_like(pts)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        grad[:, i] = (unit_stream(pts + e) - unit_stream(pts - e)) / (2 * h)
    err = np.abs(perp_grad(grad) - u_velocity(pts)).max()
    assert err <= 10 * h**2


@given(coord, coord)
def test_u_lambda_periodic(x, y):
    p = np.array([x, y])
    assert np.array_equal(u_velocity(p), u_velocity(p + 1.0))
    assert np.array_equal(u_velocity(p), u_velocity(p + [2.0, 0.0]))


@given(coord, coord, st.integers(0, 12))
def test_b_is_rescaled_u(x, y, k):
    t = 2.0**-k * 0.75
    assert eval_b(t, (x, y)) == eval_u((x * 2.0**k, y * 2.0**k))


def test_field_descriptor():
    f = DepauwField(max_stage_depth=5)
    assert f.describe() == {"kind": "exact", "max_stage_depth": 5}
    assert f.sup_norm == 2
    assert close(f(0.75, [[0.3, 0.1]])[0], (0, 1.2))
