"""HTTP service around the experiment runners.

Endpoints::

    GET  /health
    POST /field         evaluate the staged field at dyadic points
    POST /flow          exact flow of one dyadic point between dyadic times
    POST /runs          submit an ExperimentConfig, returns a run id
    GET  /runs/{id}     status, exit code and report of a run

Runs execute one at a time on a background worker thread, in submission
order.  Start with ``uvicorn depauw.service:app``.
"""
from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .dyadic import Dyadic, TorusPoint
from .exact_flow import FlowDepthError, FlowQuery, flow
from .experiments import ExperimentConfig, RunResult, run
from .field import FieldDomainError, eval_b, eval_stream, stage_index

app = FastAPI(title="depauw", version=__version__)

_pool = ThreadPoolExecutor(max_workers=1)
_runs: dict[str, dict] = {}
_lock = threading.Lock()


class FieldRequest(BaseModel):
    t: str = Field(..., description="dyadic time in (0, 1], e.g. '3/8'")
    points: list[tuple[str, str]]


class FieldValue(BaseModel):
    point: tuple[str, str]
    velocity: tuple[float, float]
    stream: float


class FieldResponse(BaseModel):
    t: str
    stage: int
    values: list[FieldValue]


class FlowRequest(BaseModel):
    point: tuple[str, str]
    t_start: str
    t_end: str
    max_stage_depth: int = 30


class FlowSample(BaseModel):
    t: str
    point: tuple[str, str]


class FlowResponse(BaseModel):
    end: tuple[str, str]
    samples: list[FlowSample]


class RunStatus(BaseModel):
    id: str
    state: Literal["queued", "running", "done", "error"]
    result: RunResult | None = None
    error: str | None = None


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/field", response_model=FieldResponse)
def field_values(req: FieldRequest):
    try:
        t = Dyadic.parse(req.t)
        k = stage_index(t)
        vals = []
        for pt in req.points:
            p = TorusPoint.of(pt)
            vals.append(FieldValue(point=tuple(p.to_json()), velocity=eval_b(t, p), stream=eval_stream(k, p)))
    except (ValueError, FieldDomainError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return FieldResponse(t=str(t), stage=k, values=vals)


@app.post("/flow", response_model=FlowResponse)
def flow_point(req: FlowRequest):
    try:
        q = FlowQuery(Dyadic.parse(req.t_start), Dyadic.parse(req.t_end))
        res = flow(TorusPoint.of(req.point), q, req.max_stage_depth)
    except FlowDepthError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    except (ValueError, FieldDomainError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return FlowResponse(
        end=tuple(res.end.to_json()),
        samples=[FlowSample(t=str(t), point=tuple(p.to_json())) for t, p in res.samples],
    )


def _execute(run_id: str, cfg: ExperimentConfig):
    with _lock:
        _runs[run_id]["state"] = "running"
    try:
        result = run(cfg)
        update = {"state": "done", "result": result}
    except Exception as exc:  # reported through GET /runs/{id}
        update = {"state": "error", "error": f"{type(exc).__name__}: {exc}"}
    with _lock:
        _runs[run_id].update(update)


@app.post("/runs", response_model=RunStatus, status_code=202)
def submit(cfg: ExperimentConfig):
    run_id = uuid.uuid4().hex[:12]
    with _lock:
        _runs[run_id] = {"state": "queued"}
    _pool.submit(_execute, run_id, cfg)
    return RunStatus(id=run_id, state="queued")


@app.get("/runs/{run_id}", response_model=RunStatus)
def status(run_id: str):
    with _lock:
        entry = _runs.get(run_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return RunStatus(id=run_id, **entry)
