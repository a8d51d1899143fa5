import numpy as np
import pytest

from depauw.dyadic import torus_distance
from depauw.paths import Path, PathEnsemble, stop_backward, stop_ensemble, unwrap


def _ensemble(n=20, t=9, seed=0):
    rng = np.random.default_rng(seed)
    times = np.linspace(0.125, 1.0, t)
    steps = rng.uniform(-0.1, 0.1, (n, t, 2))
    pts = np.mod(rng.uniform(0, 2, (n, 1, 2)) + np.cumsum(steps, axis=1), 2.0)
    return PathEnsemble(times, pts, np.full(n, 1.0 / n), {"seed": seed, "field": "test"})


def test_binary_roundtrip(tmp_path):
    e = _ensemble()
    e.save(tmp_path / "e.bin")
    f = PathEnsemble.load(tmp_path / "e.bin")
    assert np.array_equal(e.times, f.times) and np.array_equal(e.points, f.points)
    assert np.array_equal(e.weights, f.weights) and f.metadata == e.metadata
    assert (tmp_path / "e.bin").read_bytes()[:8] == b"DPWENS01"


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not an ensemble")
    with pytest.raises(ValueError):
        PathEnsemble.load(tmp_path / "x.bin")


def test_csv_roundtrip(tmp_path):
    e = _ensemble(3, 4)
    e.to_csv(tmp_path / "e.csv")
    rows = np.loadtxt(tmp_path / "e.csv", delimiter=",", skiprows=1)
    assert rows.shape == (12, 5)
    assert np.array_equal(rows[:, 3:].reshape(3, 4, 2), e.points)


def test_shape_validation():
    with pytest.raises(ValueError):
        Path([0.5, 0.25], [[0, 0], [0, 0]])
    with pytest.raises(ValueError):
        PathEnsemble([0.5, 1.0], np.zeros((2, 3, 2)), np.ones(2))


def test_unwrap_crosses_seam():
    pts = np.array([[[1.95, 0.0], [0.05, 0.0], [0.15, 0.0]]])
    assert np.allclose(unwrap(pts)[0, :, 0], [1.95, 2.05, 2.15])


def test_interpolation_wrap_safe():
    p = Path([0.5, 1.0], [[1.9, 1.0], [0.1, 1.0]])
    assert np.allclose(p.at(0.75), [0.0, 1.0]) or np.allclose(p.at(0.75), [2.0, 1.0])
    with pytest.raises(ValueError):
        p.at(0.25)


def test_stop_examples():
    e = _ensemble(1)
    p = e[0]
    assert np.array_equal(stop_backward(p, 0.0).points, p.points)
    q = stop_backward(p, 1.0)
    assert np.all(q.points == p.points[-1])
    r = stop_backward(p, 0.3)
    assert np.all(r.points[r.times <= 0.3] == p.at(0.3))
    after = r.times > 0.3
    assert np.array_equal(r.points[after], p.points[p.times > 0.3])
    with pytest.raises(ValueError):
        stop_backward(p, 1.5)


def test_stop_distance_bound():
    # Lipschitz-2 paths: stopping moves them by at most 2 tau
    times = np.linspace(0.0, 1.0, 65)
    rng = np.random.default_rng(3)
    ang = rng.uniform(0, 2 * np.pi, (50, 64))
    steps = 2 * (times[1] - times[0]) * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    pts = np.mod(np.concatenate([np.zeros((50, 1, 2)), np.cumsum(steps, axis=1)], axis=1), 2.0)
    e = PathEnsemble(times, pts, np.full(50, 0.02))
    for tau in (0.5, 0.25, 0.125):
        s = stop_ensemble(e, tau)
        d = torus_distance(s.points, e.points).max()
        assert d <= 2 * tau + 1e-12
        assert s.metadata["stopped_at"] == tau
