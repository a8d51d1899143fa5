"""Empirical path-space measures: marginals, stopping, BL distances, joint
endpoint histograms and their disintegration.

Bounded-Lipschitz bank ``v1`` (all functionals are bounded by 1 and
1-Lipschitz for the sup distance between paths), evaluated at the times
``{t_min, 1/8, 1/2, 1}`` that both ensembles cover:

* ``sin[a,phase]@t``: ``sin(pi a.x + phase) / (pi |a|)`` for
  ``a`` in (1,0) (0,1) (1,1) (1,-1) (2,0) (0,2) and phase 0, pi/2;
* ``dist[c]@t``: ``min(1, d(x, c))`` for eight fixed centres ``c``;
* ``pair@s,t``: ``d(gamma(s), gamma(t)) / 2`` for every pair of bank times.

Pair functionals are what separates ensembles with equal (uniform)
one-time marginals.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .dyadic import cell_indices, cells_per_side, torus_distance
from .paths import PathEnsemble, stop_ensemble

BANK_ID = "v1"
_FREQS = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 0), (0, 2)]
_PHASES = [0.0, math.pi / 2]
_CENTERS = [(0.25, 0.25), (1.25, 0.25), (0.25, 1.25), (1.25, 1.25),
            (0.75, 0.75), (1.75, 0.75), (0.75, 1.75), (1.75, 1.75)]


# -- histograms ---------------------------------------------------------------

@dataclass
class CellHistogram:
    level: int
    weights: np.ndarray  # (2**(level+1), 2**(level+1))
    n_samples: int

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def to_dict(self) -> dict:
        return {"level": self.level, "n_samples": self.n_samples, "weights": self.weights.tolist()}


def _histogram(points, weights, level):
    n = cells_per_side(level)
    ix, iy = cell_indices(points, level)
    h = np.bincount(ix * n + iy, weights=weights, minlength=n * n)
    return h.reshape(n, n)


def marginal(e: PathEnsemble, t: float, level: int) -> CellHistogram:
    """Cell weights of the time-``t`` positions (error outside the sampled range)."""
    return CellHistogram(level, _histogram(e.at(t), e.weights, level), len(e))


@dataclass
class UniformityTest:
    max_abs_z: float
    sigma: float
    worst_cell: tuple

    @property
    def passed(self) -> bool:
        return self.max_abs_z <= self.sigma

    def to_dict(self) -> dict:
        return {"max_abs_z": self.max_abs_z, "sigma": self.sigma, "worst_cell": list(self.worst_cell),
                "passed": self.passed}


def uniformity_test(h: CellHistogram, sigma: float = 4.0) -> UniformityTest:
    """Cellwise multinomial bound: every count within ``sigma`` binomial SDs of ``N/cells``."""
    counts = h.weights / h.total * h.n_samples
    p = 1.0 / counts.size
    z = (counts - h.n_samples * p) / math.sqrt(h.n_samples * p * (1 - p))
    worst = np.unravel_index(int(np.argmax(np.abs(z))), z.shape)
    return UniformityTest(float(np.abs(z).max()), sigma, (h.level, int(worst[0]), int(worst[1])))


def apply_stop(e: PathEnsemble, tau: float) -> PathEnsemble:
    """Every path frozen at its time-``tau`` value before ``tau``."""
    return stop_ensemble(e, tau)


# -- bounded-Lipschitz distance --------------------------------------------------

@dataclass
class BLDistanceEstimate:
    value: float
    bank: str
    sample_sizes: tuple
    times: tuple
    argmax: str = ""

    def to_dict(self) -> dict:
        return {"value": self.value, "bank": self.bank, "sample_sizes": list(self.sample_sizes),
                "times": list(self.times), "argmax": self.argmax}


def bank_times(e1: PathEnsemble, e2: PathEnsemble) -> list:
    t_min = max(e1.t_min, e2.t_min)
    t_max = min(float(e1.times[-1]), float(e2.times[-1]))
    ts = sorted({t for t in (t_min, 0.125, 0.5, 1.0) if t_min <= t <= t_max})
    return ts


def bank_values(e: PathEnsemble, times) -> dict:
    """Weighted means of every bank functional over ``e``."""
    w = e.weights / e.weights.sum()
    pos = {t: e.at(t) for t in times}
    out = {}
    for t, x in pos.items():
        for a in _FREQS:
            norm = math.pi * math.hypot(*a)
            arg = math.pi * (a[0] * x[:, 0] + a[1] * x[:, 1])
            for ph in _PHASES:
                out[f"sin[{a[0]},{a[1]},{ph:.4f}]@{t!r}"] = float(w @ (np.sin(arg + ph) / norm))
        for c in _CENTERS:
            out[f"dist[{c[0]},{c[1]}]@{t!r}"] = float(w @ np.minimum(1.0, torus_distance(x, np.array(c))))
    for i, s in enumerate(times):
        for t in times[i + 1:]:
            out[f"pair@{s!r},{t!r}"] = float(w @ (0.5 * torus_distance(pos[s], pos[t])))
    return out


def bl_distance(e1: PathEnsemble, e2: PathEnsemble) -> BLDistanceEstimate:
    """Max over bank ``v1`` of the absolute difference of means (a lower estimate of BL)."""
    times = bank_times(e1, e2)
    if not times:
        raise ValueError("ensembles share no bank time")
    v1, v2 = bank_values(e1, times), bank_values(e2, times)
    diffs = {k: abs(v1[k] - v2[k]) for k in v1}
    key = max(diffs, key=diffs.get)
    return BLDistanceEstimate(diffs[key], BANK_ID, (len(e1), len(e2)), tuple(times), key)


def sup_distance(e1: PathEnsemble, e2: PathEnsemble, t_lo: float = 0.0, t_hi: float = 1.0) -> np.ndarray:
    """Per-path max distance over the common sample times in ``[t_lo, t_hi]``."""
    common = np.intersect1d(e1.times, e2.times)
    common = common[(common >= t_lo) & (common <= t_hi)]
    if not len(common):
        raise ValueError("no common sample times in range")
    i1 = np.searchsorted(e1.times, common)
    i2 = np.searchsorted(e2.times, common)
    return torus_distance(e1.points[:, i1], e2.points[:, i2]).max(axis=1)


# -- joint histograms and disintegration ---------------------------------------

@dataclass
class EndpointJointHistogram:
    start_level: int
    target_level: int
    counts: sparse.csr_matrix  # rows: flat start cell, cols: flat target cell; total weight 1
    start_time: float = 0.0
    end_time: float = 1.0

    def row_marginal(self) -> np.ndarray:
        n = cells_per_side(self.start_level)
        return np.asarray(self.counts.sum(axis=1)).ravel().reshape(n, n)

    def column_marginal(self) -> np.ndarray:
        n = cells_per_side(self.target_level)
        return np.asarray(self.counts.sum(axis=0)).ravel().reshape(n, n)

    def tail_bound(self) -> float:
        """Displacement bound ``2 t_min`` between the earliest sample and time 0."""
        return 2.0 * self.start_time

    def merge(self, other: "EndpointJointHistogram", w_self: float = 0.5) -> "EndpointJointHistogram":
        return EndpointJointHistogram(self.start_level, self.target_level,
                                      (w_self * self.counts + (1 - w_self) * other.counts).tocsr(),
                                      self.start_time, self.end_time)


def joint_histogram(e: PathEnsemble, t_a: float, level_a: int, t_b: float, level_b: int) -> EndpointJointHistogram:
    na, nb = cells_per_side(level_a), cells_per_side(level_b)
    ax, ay = cell_indices(e.at(t_a), level_a)
    bx, by = cell_indices(e.at(t_b), level_b)
    w = e.weights / e.weights.sum()
    m = sparse.coo_matrix((w, (ax * na + ay, bx * nb + by)), shape=(na * na, nb * nb)).tocsr()
    m.sum_duplicates()
    return EndpointJointHistogram(level_a, level_b, m, t_a, t_b)


def endpoint_joint(e: PathEnsemble, start_level: int, target_level: int) -> EndpointJointHistogram:
    """Joint cells of (position at the earliest time, position at ``t = 1``)."""
    if e.times[-1] != 1.0:
        raise ValueError("ensemble must reach t = 1")
    return joint_histogram(e, e.t_min, start_level, 1.0, target_level)


@dataclass
class ConditionalHistogram:
    start_level: int
    target_level: int
    rows: sparse.csr_matrix  # normalized; absent rows are all zero
    row_mass: np.ndarray  # flat
    omitted: int

    def present(self) -> np.ndarray:
        return np.flatnonzero(self.row_mass > 0)

    def row(self, flat_start: int) -> dict:
        r = self.rows.getrow(flat_start)
        n = cells_per_side(self.target_level)
        return {(int(j) // n, int(j) % n): float(v) for j, v in zip(r.indices, r.data)}

    def dense(self) -> np.ndarray:
        return self.rows.toarray()

    def reconstruct_columns(self) -> np.ndarray:
        """``sum_x mass(x) row(x)``: should equal the column marginal."""
        return np.asarray(self.rows.T @ self.row_mass).ravel()

    def to_csv(self, path) -> None:
        """One line per present start cell: start cell, mass, then the target probabilities."""
        n = cells_per_side(self.start_level)
        dense = self.rows.toarray()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ix", "iy", "mass", *[f"target_{j}" for j in range(dense.shape[1])]])
            for i in self.present():
                w.writerow([i // n, i % n, repr(float(self.row_mass[i])), *[repr(float(v)) for v in dense[i]]])


def disintegrate(j: EndpointJointHistogram) -> ConditionalHistogram:
    """Normalize each start row; rows with no mass are left out and counted."""
    mass = np.asarray(j.counts.sum(axis=1)).ravel()
    inv = np.zeros_like(mass)
    nz = mass > 0
    inv[nz] = 1.0 / mass[nz]
    rows = (sparse.diags(inv) @ j.counts).tocsr()
    return ConditionalHistogram(j.start_level, j.target_level, rows, mass, int((~nz).sum()))


# -- stochasticity ----------------------------------------------------------------

def colour_sets(level: int):
    """Flat indices of black (checkerboard value 1) and white cells at ``level``."""
    n = cells_per_side(level)
    i = np.arange(n * n)
    odd = ((i // n + i % n) & 1) == 1
    return set(np.flatnonzero(odd).tolist()), set(np.flatnonzero(~odd).tolist())


@dataclass
class StochasticityReport:
    start_level: int
    target_level: int
    rows: list  # per present start row
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"start_level": self.start_level, "target_level": self.target_level,
                "aggregates": self.aggregates, "rows": self.rows}

    def to_json(self, path, extra=None) -> None:
        with open(path, "w") as fh:
            json.dump({**(extra or {}), **self.to_dict()}, fh, indent=1, sort_keys=True)


def _tv(a, b) -> np.ndarray:
    return 0.5 * np.abs(a - b).sum(axis=1)


def stochasticity_report(c: ConditionalHistogram, black_cells=None, white_cells=None,
                         branches=None, atom_limit: float = 0.6, black_tol: float = 0.05) -> StochasticityReport:
    """Per start row: largest atom, black and white mass, and (with
    ``branches=(c_B, c_W)``) the TV distance between the branch rows.

    A row with a single atom is flagged deterministic.  A branch row that
    is missing counts as TV 0.
    """
    if black_cells is None or white_cells is None:
        black_cells, white_cells = colour_sets(c.target_level)
    dense = c.dense()
    black = np.zeros(dense.shape[1], bool)
    black[list(black_cells)] = True
    white = np.zeros(dense.shape[1], bool)
    white[list(white_cells)] = True
    present = c.present()
    n = cells_per_side(c.start_level)
    d = dense[present]
    atom = d.max(axis=1)
    bm = d[:, black].sum(axis=1)
    wm = d[:, white].sum(axis=1)
    tv = None
    if branches is not None:
        cb, cw = branches
        db, dw = cb.dense()[present], cw.dense()[present]
        ok = (cb.row_mass[present] > 0) & (cw.row_mass[present] > 0)
        tv = np.where(ok, _tv(db, dw), 0.0)
    rows = []
    for k, i in enumerate(present):
        r = {"cell": [c.start_level, int(i // n), int(i % n)], "mass": float(c.row_mass[i]),
             "max_atom": float(atom[k]), "black_mass": float(bm[k]), "white_mass": float(wm[k]),
             "deterministic": bool(atom[k] >= 1.0)}
        if tv is not None:
            r["branch_tv"] = float(tv[k])
        rows.append(r)
    q = [0.05, 0.25, 0.5, 0.75, 0.95]
    agg = {
        "rows": int(len(present)),
        "omitted_rows": c.omitted,
        "max_atom_quantiles": dict(zip(map(str, q), np.quantile(atom, q).tolist())),
        "black_mass_quantiles": dict(zip(map(str, q), np.quantile(bm, q).tolist())),
        "frac_atom_le_limit": float(np.mean(atom <= atom_limit)),
        "frac_black_within_tol": float(np.mean(np.abs(bm - 0.5) <= black_tol)),
        "frac_deterministic": float(np.mean(atom >= 1.0)),
        "atom_limit": atom_limit,
        "black_tol": black_tol,
    }
    if tv is not None:
        agg["branch_tv_quantiles"] = dict(zip(map(str, q), np.quantile(tv, q).tolist()))
        agg["frac_branch_tv_ge_0.9"] = float(np.mean(tv >= 0.9))
    return StochasticityReport(c.start_level, c.target_level, rows, agg)


def branch_conditionals(e: PathEnsemble, start_level: int, target_level: int):
    """Split ``e`` by the colour of the unit cell reached at ``t = 1`` and
    disintegrate each half: the ``eta^B`` and ``eta^W`` branches."""
    ix, iy = cell_indices(e.at(1.0), 0)
    is_black = ((ix + iy) & 1) == 1
    cb = disintegrate(endpoint_joint(e.subset(is_black), start_level, target_level))
    cw = disintegrate(endpoint_joint(e.subset(~is_black), start_level, target_level))
    return cb, cw
