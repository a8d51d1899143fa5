"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
when output capture is on.
"""
import time

import pytest

from depauw.density import bump_bank, check_refining, evolve_rho_B, weak_divergence_residual
from depauw.dyadic import Dyadic, torus_distance
from depauw.exact_flow import check_quarter_turn, flow_points
from depauw.experiments import convergence_stats
from depauw.field import DepauwField
from depauw.measures import (
    apply_stop,
    bl_distance,
    branch_conditionals,
    disintegrate,
    endpoint_joint,
    marginal,
    stochasticity_report,
    uniformity_test,
)
from depauw.tracer import backward_ensemble, integrate_points, lipschitz_audit, start_points

EPS = [2.0**-4, 2.0**-5, 2.0**-6, 2.0**-7]
GENERATED = {}  # every ensemble built here, for the Lipschitz audit


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def uniform_ensemble():
    e = backward_ensemble(10**5, 10, seed=1)
    GENERATED["exact uniform N=1e5 K=10"] = e
    return e


@pytest.fixture(scope="module")
def stratified_run():
    t0 = time.perf_counter()
    e = backward_ensemble(10**6, 10, seed=11, start={"kind": "stratified"})
    c = disintegrate(endpoint_joint(e, 6, 0))
    rep = stochasticity_report(c, branches=branch_conditionals(e, 6, 0))
    elapsed = time.perf_counter() - t0
    GENERATED["exact stratified N=1e6 K=10"] = e
    return rep, elapsed


@pytest.fixture(scope="module")
def convergence_ensembles(table_cache):
    ens = {}
    for eps in EPS:
        ens[eps] = backward_ensemble(1000, 3, eps=eps, seed=3, cache_dir=table_cache)
        GENERATED[f"mollified eps={eps} N=1e3 K=3"] = ens[eps]
    return ens


def test_refining_recursion(capsys):
    t0 = time.perf_counter()
    rep = check_refining(evolve_rho_B(10))
    elapsed = time.perf_counter() - t0
    ok = rep.passed and elapsed < 5.0
    verdict(capsys, "refining recursion", ok,
            f"{len(rep.checks)} dyadic times, {len(rep.failures)} mismatches, {elapsed:.2f} s (limit 5 s)")


def test_quarter_turn(capsys):
    t0 = time.perf_counter()
    bad = cells = 0
    for level in range(1, 11):
        for stage in range(level):
            r = check_quarter_turn(level, stage, exact_samples=64)
            bad += r["float_mismatches"] + r["exact_mismatches"]
            cells += r["cells"]
    pts = start_points(10**4, 17)
    res = integrate_points(DepauwField(), pts, 0.5, 1.0, 1e-5, record_every=1 << 62)
    exact = flow_points(pts, Dyadic(1, 1), Dyadic(1, 0))
    err = float(torus_distance(res.points[:, -1], exact).max())
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and err <= 1e-6 and elapsed < 120
    verdict(capsys, "quarter-turn property", ok,
            f"{bad} cell mismatches over {cells} cells (levels 1..10, all stages); "
            f"RK4 step 1e-5 max error {err:.2e} at 1e4 points (limit 1e-6); {elapsed:.1f} s (limit 120 s)")


def test_incompressibility(capsys, uniform_ensemble):
    worst = []
    ok = True
    for t in (1.0, 0.5, 0.25, 0.125):
        for level in (2, 3):
            u = uniformity_test(marginal(uniform_ensemble, t, level), sigma=4.0)
            ok &= u.passed
            worst.append(u.max_abs_z)
    verdict(capsys, "incompressibility", ok,
            f"N=1e5, levels 2 and 3 at t in {{1, 1/2, 1/4, 1/8}}: max |z| {max(worst):.2f} (limit 4)")


def test_selection_convergence(capsys, convergence_ensembles):
    stats = convergence_stats(convergence_ensembles, t_lo=0.125)
    bl = [d["value"] for d in stats["bl"]]
    fracs = [p["frac_decrease"] for p in stats["sup_pairs"]]
    ok = stats["bl_monotone"] and all(f >= 0.95 for f in fracs)
    verdict(capsys, "selection convergence", ok,
            "BL consecutive " + " > ".join(f"{v:.4f}" for v in bl)
            + f" (monotone: {stats['bl_monotone']}); sup-distance decrease fractions "
            + ", ".join(f"{f:.3f}" for f in fracs) + " (need >= 0.95 each)")


def test_stochasticity(capsys, stratified_run):
    rep, elapsed = stratified_run
    a = rep.aggregates
    ok = a["frac_atom_le_limit"] >= 0.9 and a["frac_black_within_tol"] >= 0.9 and elapsed < 600
    verdict(capsys, "stochasticity", ok,
            f"K=10, N=1e6, {a['rows']} start rows at level 6: atom <= 0.6 for {a['frac_atom_le_limit']:.4f}, "
            f"black mass 0.5 +- 0.05 for {a['frac_black_within_tol']:.4f} (need >= 0.9 each); "
            f"{elapsed:.1f} s (limit 600 s)")


def test_mutual_singularity(capsys, stratified_run):
    rep, _ = stratified_run
    frac = rep.aggregates["frac_branch_tv_ge_0.9"]
    verdict(capsys, "mutual singularity", frac >= 0.9,
            f"branch TV >= 0.9 for {frac:.4f} of start cells at target level 0 (need >= 0.9)")


def test_stopping_maps(capsys, uniform_ensemble):
    taus = [0.5, 0.25, 0.125, 0.0625]
    vals = [bl_distance(apply_stop(uniform_ensemble, tau), uniform_ensemble).value for tau in taus]
    bounded = all(v <= 2 * tau for v, tau in zip(vals, taus))
    decreasing = all(a > b for a, b in zip(vals, vals[1:]))
    verdict(capsys, "stopping maps", bounded and decreasing,
            ", ".join(f"tau={tau}: {v:.4f}" for tau, v in zip(taus, vals))
            + f" (each <= 2 tau: {bounded}; decreasing: {decreasing})")


def test_weak_pde_residual(capsys):
    traj = evolve_rho_B(10)
    zs = []
    for i, f in enumerate(bump_bank()):
        est = weak_divergence_residual(traj, f, 10**6, seed=i)
        zs.append(est.estimate / est.stderr)
    ok = all(abs(z) <= 3 for z in zs)
    verdict(capsys, "weak PDE residual", ok,
            "z = " + ", ".join(f"{z:+.2f}" for z in zs) + " (need |z| <= 3 for all 10)")


def test_lipschitz_concentration(capsys, uniform_ensemble, stratified_run, convergence_ensembles):
    lines = []
    ok = True
    for name, e in GENERATED.items():
        a = lipschitz_audit(e, bound=2.0)
        ok &= a.passed
        lines.append(f"{name}: max ratio {a.max_ratio:.6f}, limit {2 + a.tolerance:.6g}, {a.n_failing} failing")
    verdict(capsys, "Lipschitz concentration", ok, f"{len(GENERATED)} ensembles; " + "; ".join(lines))
