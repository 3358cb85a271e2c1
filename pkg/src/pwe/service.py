"""HTTP service exposing validate, run and compare over the core package."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal, Optional

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, model_validator

from . import scenario_io as sio
from .pwe_graph import w_to_dbm

log = logging.getLogger(__name__)

app = FastAPI(title="pwe", version="0.1.0")


class ScenarioSource(BaseModel):
    path: Optional[str] = None
    text: Optional[str] = None
    name: str = "scenario"

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.text is None):
            raise ValueError("give exactly one of path or text")
        return self

    def load(self) -> sio.Scenario:
        if self.path is not None:
            return sio.load_scenario(self.path)
        return sio.parse_scenario(self.text, self.name)


class ValidateRequest(ScenarioSource):
    pass


class ValidateResponse(BaseModel):
    name: str
    users: int
    pairs: int
    blocked: int
    tile_size: float


class RunRequest(ScenarioSource):
    mode: Literal["pwe", "natural"] = "pwe"
    seed: Optional[int] = None
    steps: Optional[int] = Field(default=None, ge=0)
    out: Optional[str] = None
    workers: Optional[int] = Field(default=None, ge=1)


class PairSummary(BaseModel):
    tx: int
    rx: int
    objective: str
    received_dbm: Optional[float]
    connected: bool
    paths: int


class RunResponse(BaseModel):
    scenario: str
    mode: str
    seed: int
    tiles: int
    coated_tiles: int
    configured_tiles: int
    configured_fraction: float
    pairs: list[PairSummary]
    trajectory_steps: int
    files: list[str]


class CompareRequest(BaseModel):
    a: str
    b: str


class PairDeltaModel(BaseModel):
    pair: str
    a_dbm: Optional[float]
    b_dbm: Optional[float]
    delta_db: Optional[float]


class CompareResponse(BaseModel):
    pairs: list[PairDeltaModel]
    text: str


class ErrorBody(BaseModel):
    message: str
    line: Optional[int] = None
    source: Optional[str] = None


def _invalid(exc: sio.ScenarioError) -> JSONResponse:
    body = ErrorBody(message=exc.message, line=exc.line, source=exc.source)
    return JSONResponse(status_code=422, content={"detail": body.model_dump()})


def _failed(exc: Exception) -> JSONResponse:
    log.exception("request failed")
    return JSONResponse(status_code=500, content={"detail": ErrorBody(message=f"{type(exc).__name__}: {exc}").model_dump()})


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/validate", response_model=ValidateResponse)
def validate(req: ValidateRequest):
    try:
        sc = req.load()
    except sio.ScenarioError as exc:
        return _invalid(exc)
    except Exception as exc:       # noqa: BLE001 - reported to the client as a runtime error
        return _failed(exc)
    return ValidateResponse(name=sc.name, users=len(sc.users), pairs=len(sc.pairs),
                            blocked=sum(1 for p in sc.pairs if p.objective.block),
                            tile_size=sc.floorplan.tile_size)


@app.post("/run", response_model=RunResponse)
def run(req: RunRequest):
    try:
        sc = req.load()
    except sio.ScenarioError as exc:
        return _invalid(exc)
    except Exception as exc:       # noqa: BLE001
        return _failed(exc)
    try:
        report = sio.run(sc, req.mode, req.seed, req.steps, req.workers)
        files = [str(p) for p in sio.emit_report(report, req.out)] if req.out else []
    except Exception as exc:       # noqa: BLE001
        return _failed(exc)
    pairs = [PairSummary(tx=p.tx, rx=p.rx, objective=p.objective,
                         received_dbm=round(w_to_dbm(p.received), 2) if p.received > 0 else None,
                         connected=p.connected, paths=p.paths) for p in report.pairs]
    return RunResponse(scenario=report.scenario, mode=report.mode, seed=report.seed, tiles=report.n_tiles,
                       coated_tiles=report.coated_tiles, configured_tiles=report.configured,
                       configured_fraction=round(report.configured_fraction, 4), pairs=pairs,
                       trajectory_steps=len(report.trajectory), files=files)


@app.post("/compare", response_model=CompareResponse)
def compare(req: CompareRequest):
    for p in (req.a, req.b):
        target = Path(p)
        if not (target / "metrics.txt" if target.is_dir() else target).is_file():
            return JSONResponse(status_code=404, content={"detail": ErrorBody(message=f"no report at {p}").model_dump()})
    try:
        deltas = sio.compare(req.a, req.b)
    except Exception as exc:       # noqa: BLE001
        return _failed(exc)
    return CompareResponse(pairs=[PairDeltaModel(pair=d.pair, a_dbm=d.a, b_dbm=d.b, delta_db=d.delta) for d in deltas],
                           text=sio.compare_text(deltas))
