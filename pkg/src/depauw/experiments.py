"""Experiment configurations and runners shared by the CLI and the service.

Each run writes into ``config.out``: ``config.json`` (resolved config with
its hash), ``report.json`` and experiment-specific CSV / ensemble files.
Every file carries the config hash and seed.  Outputs contain no
timestamps or timings, so identical configs give identical bytes.

Exit status: 0 all checks passed, 1 an invariant failed, 2 bad config.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from .density import (
    bump_bank,
    check_properties,
    check_refining,
    evolve_rho_B,
    evolve_rho_W,
    heatmap_json,
    weak_divergence_residual,
)
from .dyadic import Dyadic, TorusPoint, cells_per_side, torus_distance
from .exact_flow import flow_points, trajectory_points
from .field import DepauwField, eval_b, eval_stream, stage_index
from .measures import (
    apply_stop,
    bl_distance,
    branch_conditionals,
    disintegrate,
    endpoint_joint,
    marginal,
    stochasticity_report,
    sup_distance,
    uniformity_test,
)
from .mollify import MollifiedField
from .paths import PathEnsemble
from .tracer import backward_ensemble, integrate_points, lipschitz_audit, start_points

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
Experiment = Literal["field-eval", "density", "trace", "converge", "stochasticity"]

DEFAULT_EPS = [2.0**-4, 2.0**-5, 2.0**-6, 2.0**-7]
# per-experiment defaults for fields left unset
_DEFAULTS = {
    "field-eval": {},
    "density": {"depth": 10},
    "trace": {"depth": 4, "n": 1000},
    "converge": {"depth": 3, "n": 1000},
    "stochasticity": {"depth": 10, "n": 1_000_000, "start": {"kind": "stratified"}},
}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: Experiment
    seed: int = 0
    workers: int = Field(1, ge=1)
    out: str = "out"
    check: bool = False
    depth: int | None = Field(None, ge=1, le=30)
    n: int | None = Field(None, ge=1)
    eps: list[float] = Field(default_factory=lambda: list(DEFAULT_EPS))
    step: float | None = Field(None, gt=0)
    start: dict = Field(default_factory=lambda: {"kind": "uniform"})
    start_level: int = Field(6, ge=0)
    target_level: int = Field(0, ge=0)
    cache_dir: str | None = None
    # field-eval
    times: list[str] = Field(default_factory=lambda: ["1", "1/2", "3/8"])
    points: list[list[str]] = Field(default_factory=lambda: [["1/4", "0"], ["1/8", "1/16"], ["3/4", "1/4"]])
    mollified: bool = False
    # density
    output_level: int = Field(4, ge=0)
    residual_samples: int = Field(0, ge=0)
    # trace
    field: Literal["exact", "mollified"] = "exact"
    oracle: bool = False
    oracle_points: int = Field(1000, ge=1)
    oracle_stages: int = Field(3, ge=1, le=5)
    oracle_step: float = Field(1e-5, gt=0)
    csv: bool = False
    samples_per_stage: int = Field(1, ge=1)

    @field_validator("eps")
    @classmethod
    def _eps_ok(cls, v):
        if not v or any(not 0 < e < 0.25 for e in v):
            raise ValueError("eps values must lie in (0, 1/4)")
        return v

    @field_validator("times")
    @classmethod
    def _times_ok(cls, v):
        for t in v:
            d = Dyadic.parse(t)
            if not 0 < d <= 1:
                raise ValueError(f"time {t} outside (0, 1]")
        return v

    @field_validator("points")
    @classmethod
    def _points_ok(cls, v):
        for p in v:
            if len(p) != 2:
                raise ValueError("points are pairs of dyadic coordinates")
            TorusPoint.of(p)
        return v

    @field_validator("start")
    @classmethod
    def _start_ok(cls, v):
        if v.get("kind", "uniform") not in ("uniform", "stratified", "cell", "dirac"):
            raise ValueError("start.kind must be uniform, stratified, cell or dirac")
        return v

    def resolved(self) -> "ExperimentConfig":
        data = self.model_dump()
        for k, val in _DEFAULTS[self.experiment].items():
            if k == "start":
                if "start" not in self.model_fields_set:
                    data[k] = val
            elif data.get(k) is None:
                data[k] = val
        return ExperimentConfig(**data)

    def config_hash(self) -> str:
        # worker count and output location do not change results
        data = self.model_dump(exclude={"workers", "out"})
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class RunResult(BaseModel):
    status: int
    config_hash: str
    report: dict
    files: list[str]


class _Writer:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.files: list[str] = []
        os.makedirs(cfg.out, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.cfg.out, name)
        self.files.append(p)
        return p

    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.cfg.seed, "version": __version__}

    def json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump({**self.stamp(), **obj}, fh, indent=1, sort_keys=True, default=_jsonable)
            fh.write("\n")

    def csv_rows(self, name, header, rows):
        with open(self.path(name), "w") as fh:
            fh.write(f"# config_hash={self.hash} seed={self.cfg.seed}\n")
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(_fmt(x) for x in r) + "\n")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return str(o)


# -- experiments --------------------------------------------------------------

def run_field(cfg, w: _Writer):
    rows, report_rows = [], []
    ok = True
    mollified = [MollifiedField(e, cache_dir=cfg.cache_dir) for e in cfg.eps] if cfg.mollified else []
    for ts in cfg.times:
        t = Dyadic.parse(ts)
        k = stage_index(t)
        for pt in cfg.points:
            p = TorusPoint.of(pt)
            v = eval_b(t, p)
            h = eval_stream(k, p)
            ok &= bool(np.hypot(*v) <= 2.0)
            entry = {"t": str(t), "stage": k, "point": p.to_json(), "velocity": list(v), "stream": h}
            for m in mollified:
                if m.admits(k):
                    entry[f"mollified_{m.eps!r}"] = m.velocity(k, np.array([p.to_floats()]))[0].tolist()
            report_rows.append(entry)
            rows.append([str(t), k, str(p.x1), str(p.x2), v[0], v[1], h])
    w.csv_rows("field.csv", ["t", "stage", "x1", "x2", "b1", "b2", "stream"], rows)
    return ok, {"evaluations": report_rows, "sup_bound_ok": ok}


def run_density(cfg, w: _Writer):
    K = cfg.depth
    B, W = evolve_rho_B(K), evolve_rho_W(K)
    report = {"depth": K}
    ok = True
    if cfg.check:
        ref, props = check_refining(B), check_properties(B, W)
        report["refining"] = ref.to_dict()
        report["properties"] = props.to_dict()
        ok = ref.passed and props.passed
    if cfg.residual_samples:
        res = []
        for i, f in enumerate(bump_bank()):
            e = weak_divergence_residual(B, f, cfg.residual_samples, seed=cfg.seed + i)
            res.append({"function": f.to_dict(), **e.to_dict(), "within_3se": abs(e.estimate) <= 3 * e.stderr})
        report["weak_residual"] = res
        if cfg.check:
            ok &= all(r["within_3se"] for r in res)
    level = min(cfg.output_level, K + 1)
    for t, d in B.entries:
        c = d.coarsen(level)
        n = cells_per_side(level)
        j = -int(np.log2(float(t)))
        w.csv_rows(f"rho_B_t{j}.csv", ["level", "ix", "iy", "value"],
                   ([level, ix, iy, float(c.values[ix, iy])] for ix in range(n) for iy in range(n)))
    w.json("heatmaps.json", heatmap_json(B, level))
    report["passed"] = ok
    return ok, report


def _oracle_table(cfg):
    field = DepauwField()
    rows = []
    for k in range(cfg.oracle_stages):
        pts = start_points(cfg.oracle_points, cfg.seed + k)
        a, b = 2.0 ** -(k + 1), 2.0**-k
        res = integrate_points(field, pts, a, b, cfg.oracle_step, record_every=1 << 62)
        exact = flow_points(pts, Dyadic(1, k + 1), Dyadic(1, k))
        err = torus_distance(res.points[:, -1], exact)
        rows.append({"stage": k, "points": len(pts), "step": cfg.oracle_step,
                     "max_error": float(err.max()), "median_error": float(np.median(err))})
    return rows


def run_trace(cfg, w: _Writer):
    eps = None if cfg.field == "exact" else cfg.eps[0]
    e = backward_ensemble(cfg.n, cfg.depth, eps=eps, seed=cfg.seed, start=cfg.start, step=cfg.step,
                          samples_per_stage=cfg.samples_per_stage, workers=cfg.workers, cache_dir=cfg.cache_dir)
    e.metadata.update(w.stamp())
    e.save(w.path("ensemble.bin"))
    if cfg.csv:
        e.to_csv(w.path("ensemble.csv"))
    audit = lipschitz_audit(e)
    report = {"n": len(e), "depth": cfg.depth, "field": e.metadata["field"], "lipschitz": audit.to_dict()}
    ok = audit.passed
    if cfg.check:
        occ = []
        for t in (1.0, 0.5, 0.25, 0.125):
            if t < e.t_min:
                continue
            for level in (2, 3):
                u = uniformity_test(marginal(e, t, level))
                occ.append({"t": t, "level": level, **u.to_dict()})
                ok &= u.passed
        report["incompressibility"] = occ
        stops = []
        for tau in (0.5, 0.25, 0.125, 0.0625):
            d = bl_distance(apply_stop(e, tau), e)
            stops.append({"tau": tau, "bl": d.value, "le_2tau": d.value <= 2 * tau})
        dec = all(a["bl"] > b["bl"] for a, b in zip(stops, stops[1:]))
        ok &= all(s["le_2tau"] for s in stops) and dec
        report["stopping"] = {"rows": stops, "decreasing": dec}
    if cfg.oracle:
        table = _oracle_table(cfg)
        report["oracle"] = table
        ok &= all(r["max_error"] <= 1e-6 for r in table)
        w.csv_rows("oracle.csv", ["stage", "points", "step", "max_error", "median_error"],
                   ([r["stage"], r["points"], r["step"], r["max_error"], r["median_error"]] for r in table))
    report["passed"] = ok
    return ok, report


def convergence_stats(ensembles: dict, t_lo: float = 0.125) -> dict:
    """BL between consecutive-eps ensembles and per-path sup distances to the exact paths."""
    eps = sorted(ensembles, reverse=True)
    bl = [bl_distance(ensembles[a], ensembles[b]) for a, b in zip(eps, eps[1:])]
    sup = {}
    for e in eps:
        ens = ensembles[e]
        times = [Dyadic.of(float(t)) for t in ens.times[::-1]]
        ex = trajectory_points(ens.points[:, -1], times)[:, ::-1]
        sup[e] = sup_distance(ens, PathEnsemble(ens.times, ex, ens.weights), t_lo, 1.0)
    pairs = []
    for a, b in zip(eps, eps[1:]):
        pairs.append({"eps": [a, b], "frac_decrease": float(np.mean(sup[b] < sup[a])),
                      "frac_non_increase": float(np.mean(sup[b] <= sup[a]))})
    return {
        "eps": eps,
        "bl": [d.to_dict() for d in bl],
        "bl_monotone": all(x.value > y.value for x, y in zip(bl, bl[1:])),
        "sup_pairs": pairs,
        "mean_sup": {repr(e): float(sup[e].mean()) for e in eps},
    }


def run_converge(cfg, w: _Writer):
    ens = {}
    audits = {}
    for e in cfg.eps:
        ens[e] = backward_ensemble(cfg.n, cfg.depth, eps=e, seed=cfg.seed, start=cfg.start, step=cfg.step,
                                   workers=cfg.workers, cache_dir=cfg.cache_dir)
        audits[repr(e)] = lipschitz_audit(ens[e]).to_dict()
    stats = convergence_stats(ens)
    ok = all(a["passed"] for a in audits.values())
    if cfg.check:
        ok &= stats["bl_monotone"] and all(p["frac_decrease"] >= 0.95 for p in stats["sup_pairs"])
    w.csv_rows("bl.csv", ["eps_a", "eps_b", "bl", "argmax"],
               ([a, b, d["value"], d["argmax"]] for (a, b), d in zip(zip(stats["eps"], stats["eps"][1:]), stats["bl"])))
    return ok, {**stats, "lipschitz": audits, "passed": ok}


def run_stochasticity(cfg, w: _Writer):
    e = backward_ensemble(cfg.n, cfg.depth, seed=cfg.seed, start=cfg.start, workers=cfg.workers)
    audit = lipschitz_audit(e)
    c = disintegrate(endpoint_joint(e, cfg.start_level, cfg.target_level))
    rep = stochasticity_report(c, branches=branch_conditionals(e, cfg.start_level, cfg.target_level))
    agg = rep.aggregates
    ok = audit.passed
    if cfg.check:
        ok &= agg["frac_atom_le_limit"] >= 0.9 and agg["frac_black_within_tol"] >= 0.9
        ok &= agg["frac_branch_tv_ge_0.9"] >= 0.9
    c.to_csv(w.path("conditional.csv"))
    w.json("rows.json", {"rows": rep.rows})
    return ok, {"aggregates": agg, "lipschitz": audit.to_dict(), "tail_bound": 2.0 * e.t_min, "passed": ok}


RUNNERS = {
    "field-eval": run_field,
    "density": run_density,
    "trace": run_trace,
    "converge": run_converge,
    "stochasticity": run_stochasticity,
}


def run(config: ExperimentConfig) -> RunResult:
    cfg = config.resolved()
    w = _Writer(cfg)
    w.json("config.json", {"config": cfg.model_dump()})
    log.info("running %s (hash %s)", cfg.experiment, w.hash)
    ok, report = RUNNERS[cfg.experiment](cfg, w)
    status = EXIT_OK if ok else EXIT_FAIL
    w.json("report.json", {"experiment": cfg.experiment, "status": status, "report": report})
    if not ok:
        w.json("failure.json", {"experiment": cfg.experiment, "report": report})
    return RunResult(status=status, config_hash=w.hash, report=json.loads(json.dumps(report, default=_jsonable)),
                     files=w.files)
