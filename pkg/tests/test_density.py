import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depauw.dyadic import Dyadic, cell_indices, cells_per_side
from depauw.density import (
    BACKWARD,
    FORWARD,
    DensityLevelError,
    DensityTrajectory,
    GridDensity,
    SeparableBump,
    bump_bank,
    check_properties,
    check_refining,
    evolve,
    evolve_rho_B,
    evolve_rho_W,
    expected_rho_B,
    heatmap_json,
    pushforward_stage,
    weak_divergence_residual,
    write_csv,
)
from depauw.exact_flow import stage_map_points


def _random_density(level, seed):
    n = cells_per_side(level)
    return GridDensity(level, np.random.default_rng(seed).uniform(0, 1, (n, n)))


@pytest.mark.parametrize("level,stage", [(1, 0), (3, 0), (3, 2), (5, 1), (6, 5)])
def test_pushforward_matches_flow_of_cell_centres(level, stage):
    d = _random_density(level, level + stage)
    n = cells_per_side(level)
    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    centers = (np.stack([ix.ravel(), iy.ravel()], axis=1) + 0.5) * 2.0**-level
    img = stage_map_points(centers, stage, 2.0 ** -(stage + 1))
    jx, jy = cell_indices(img, level)
    expected = np.empty_like(d.values)
    expected[jx, jy] = d.values[ix.ravel(), iy.ravel()]
    assert np.array_equal(pushforward_stage(d, stage, FORWARD).values, expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.data())
def test_mass_conserved_and_four_cycle(level, data):
    stage = data.draw(st.integers(0, level - 1))
    d = _random_density(level, data.draw(st.integers(0, 1000)))
    once = pushforward_stage(d, stage)
    assert np.array_equal(np.sort(once.values, axis=None), np.sort(d.values, axis=None))
    e = d
    for _ in range(4):
        e = pushforward_stage(e, stage)
    assert e == d
    assert pushforward_stage(once, stage, BACKWARD) == d


def test_constant_is_invariant():
    c = GridDensity.constant(4, 0.5)
    for k in range(4):
        assert pushforward_stage(c, k) == c


def test_too_coarse_grid():
    with pytest.raises(DensityLevelError):
        pushforward_stage(GridDensity.constant(2), 2)
    with pytest.raises(DensityLevelError):
        GridDensity.checkerboard(1, 2)
    with pytest.raises(ValueError):
        GridDensity(1, np.zeros((3, 3)))


def test_refining_examples():
    traj = evolve_rho_B(3)
    lvl = 4
    assert traj.at(1) == GridDensity.checkerboard(lvl)
    half = GridDensity.checkerboard(lvl, 1, complement=True)
    assert traj.at(Dyadic(1, 1)) == half
    assert traj.at(Dyadic(1, 2)) == GridDensity.checkerboard(lvl, 2)


def test_refining_all_depths():
    for depth in range(1, 11):
        assert check_refining(evolve_rho_B(depth)).passed


def test_property_examples():
    b, w = evolve_rho_B(10), evolve_rho_W(10)
    rep = check_properties(b, w)
    assert rep.passed
    assert b.at(Dyadic(1, 2)).coarsen(0).values.tolist() == [[0.5, 0.5], [0.5, 0.5]]
    assert np.all(b.at(1).values + w.at(1).values == 1)


def test_property_failure_names_cell():
    b = evolve_rho_B(2)
    w = evolve_rho_W(2)
    broken = w.at(Dyadic(1, 1)).values.copy()
    broken[3, 5] = 1 - broken[3, 5]
    w.entries[1] = (w.entries[1][0], GridDensity(3, broken))
    rep = check_properties(b, w)
    assert not rep.passed
    props = {f["property"] for f in rep.failures}
    assert "(iii) sum" in props
    assert any(f["cell"] == [3, 3, 5] for f in rep.failures)
    bad_ref = check_refining(w)
    assert not bad_ref.passed


def test_coarsen_is_exact_average():
    d = GridDensity.checkerboard(5, 3)
    assert np.all(d.coarsen(2).values == 0.5)
    assert d.coarsen(3) == GridDensity(3, GridDensity.checkerboard(3, 3).values.astype(float))
    assert d.refine(6).coarsen(5) == GridDensity(5, d.values.astype(float))


def test_expected_closed_form_parity():
    assert expected_rho_B(3, 0) == GridDensity.checkerboard(3)
    assert expected_rho_B(3, 1) == GridDensity.checkerboard(3, 1).complement()


def test_trajectory_value_at_snapshots():
    traj = evolve_rho_B(4)
    rng = np.random.default_rng(0)
    pts = np.round(rng.uniform(0, 2, (500, 2)) * 2**30) / 2**30
    for j in range(4):
        t = np.full(500, 2.0**-j)
        assert np.array_equal(traj.value(t, pts), traj.at(Dyadic(1, j)).lookup(pts))


class _ConstantPhi:
    def support_box(self):
        return (0.3, 0.9), (1.0, 1.0), 1.0

    def derivatives(self, t, x):
        return np.zeros(len(t)), np.zeros((len(t), 2))


def test_residual_of_constant_test_function_vanishes():
    est = weak_divergence_residual(evolve_rho_B(3), _ConstantPhi(), 10000)
    assert est.estimate == 0.0 and est.stderr == 0.0


def test_residual_of_zero_density_vanishes():
    # rho = 0 makes the integrand vanish identically
    empty = evolve(GridDensity.constant(3, 0.0), 2)
    f = SeparableBump(0.6, 0.2, 0.5, 0.5, 0.5)
    est = weak_divergence_residual(empty, f, 10000)
    assert est.estimate == 0.0 and est.stderr == 0.0


def test_residual_of_unit_density_consistent_with_zero():
    for f in bump_bank()[:3]:
        est = weak_divergence_residual(None, f, 2 * 10**5, seed=1)
        assert abs(est.estimate) <= 3 * est.stderr


def test_residual_of_rho_B():
    traj = evolve_rho_B(4)
    est = weak_divergence_residual(traj, bump_bank()[1], 2 * 10**5, seed=2)
    assert abs(est.estimate) <= 3 * est.stderr
    with pytest.raises(ValueError):
        weak_divergence_residual(evolve_rho_B(1), bump_bank()[-1], 10)


def test_bank_shape():
    bank = bump_bank()
    assert len(bank) == 10
    assert bank == bump_bank()
    assert sorted({f.r for f in bank}) == [0.05, 0.1, 0.3, 0.75]
    with pytest.raises(ValueError):
        SeparableBump(0.1, 0.2, 0, 0, 0.1)


def test_exports(tmp_path):
    traj = evolve_rho_B(2)
    write_csv(traj.at(1), tmp_path / "d.csv")
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert rows[0] == "level,ix,iy,value" and len(rows) == 1 + 256
    hm = heatmap_json(traj, 1)
    assert [s["time"] for s in hm["snapshots"]] == ["1/2^0", "1/2^1", "1/2^2"]
    json.dumps(hm)
    assert isinstance(traj, DensityTrajectory)
