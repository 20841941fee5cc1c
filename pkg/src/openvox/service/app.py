"""FastAPI app keeping map sessions in memory; heavy inputs are referenced by server-side paths."""

from __future__ import annotations

import statistics
import threading
import uuid
from dataclasses import asdict, dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..config import RunConfig
from ..errors import InvariantError, ValidationError
from ..instance_map import InstanceMap
from ..tensor_io import load_frame, load_ground_truth, load_map, load_table, save_map
from . import schemas


@dataclass
class Session:
    config: RunConfig
    map: InstanceMap
    frames: int = 0
    finalized: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)


def create_app() -> FastAPI:
    app = FastAPI(title="openvox", version=__version__)
    sessions: dict[str, Session] = {}

    @app.exception_handler(ValidationError)
    async def _bad_input(_: Request, exc: ValidationError):
        return JSONResponse(status_code=422, content={"error": str(exc), "kind": type(exc).__name__})

    @app.exception_handler(OSError)
    async def _io(_: Request, exc: OSError):
        return JSONResponse(status_code=404 if isinstance(exc, FileNotFoundError) else 500,
                            content={"error": str(exc), "kind": type(exc).__name__})

    @app.exception_handler(InvariantError)
    async def _internal(_: Request, exc: InvariantError):
        return JSONResponse(status_code=500, content={"error": str(exc), "kind": "InvariantError"})

    def get(map_id: str) -> Session:
        if map_id not in sessions:
            raise HTTPException(status_code=404, detail=f"no map {map_id}")
        return sessions[map_id]

    def info(map_id: str, s: Session) -> schemas.MapInfo:
        st = s.map.stats()
        return schemas.MapInfo(map_id=map_id, resolution=s.map.resolution, frames=s.frames,
                               finalized=s.finalized, **st)

    def open_session(cfg: RunConfig, m: InstanceMap | None = None) -> str:
        map_id = uuid.uuid4().hex[:12]
        sessions[map_id] = Session(cfg, m or pipeline.new_map(cfg))
        return map_id

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/maps", response_model=schemas.MapInfo, status_code=201)
    def create_map(body: schemas.CreateMap):
        try:
            cfg = RunConfig.model_validate(body.config)
        except Exception as exc:
            raise ValidationError(f"invalid config: {exc}") from exc
        map_id = open_session(cfg)
        return info(map_id, sessions[map_id])

    @app.get("/maps/{map_id}", response_model=schemas.MapInfo)
    def map_info(map_id: str):
        return info(map_id, get(map_id))

    @app.delete("/maps/{map_id}", status_code=204)
    def drop_map(map_id: str):
        get(map_id)
        del sessions[map_id]

    @app.post("/maps/{map_id}/frames", response_model=schemas.FrameResult)
    def ingest_frame(map_id: str, body: schemas.PathRequest):
        s = get(map_id)
        frame = load_frame(body.path)
        with s.lock:
            if s.finalized:
                raise ValidationError("map is finalized")
            entry = pipeline.process_frame(s.map, frame, s.config)
            s.frames += 1
        return schemas.FrameResult(**asdict(entry))

    @app.post("/maps/{map_id}/trajectory", response_model=schemas.TrajectoryResult)
    def ingest_trajectory(map_id: str, body: schemas.PathRequest):
        s = get(map_id)
        walls = []
        with s.lock:
            if s.finalized:
                raise ValidationError("map is finalized")
            for frame in pipeline.trajectory_frames(body.path):
                walls.append(pipeline.process_frame(s.map, frame, s.config).wall_ms)
                s.frames += 1
        return schemas.TrajectoryResult(frames=len(walls), instance_count=len(s.map),
                                        median_wall_ms=statistics.median(walls) if walls else 0.0)

    @app.post("/maps/{map_id}/finalize", response_model=schemas.FinalizeResult)
    def finalize(map_id: str):
        s = get(map_id)
        with s.lock:
            rep = s.map.finalize()
            s.finalized = True
        return schemas.FinalizeResult(merged=rep.merged, removed=rep.removed, instance_count=len(s.map))

    @app.post("/maps/{map_id}/query", response_model=schemas.QueryResult)
    def query(map_id: str, body: schemas.QueryRequest):
        s = get(map_id)
        rep = pipeline.query_report(s.map, np.asarray(body.embedding), body.k)
        return schemas.QueryResult(results=rep["results"])

    @app.post("/maps/{map_id}/save")
    def save(map_id: str, body: schemas.PathRequest):
        s = get(map_id)
        with s.lock:
            save_map(s.map, body.path)
        return {"path": body.path, **s.map.stats()}

    @app.post("/maps/load", response_model=schemas.MapInfo, status_code=201)
    def load(body: schemas.PathRequest):
        m = load_map(body.path)
        cfg = RunConfig(resolution=m.resolution,
                        association={k: getattr(m.config, k) for k in ("tau_geo", "tau_vis", "margin", "min_voxels")})
        map_id = open_session(cfg, m)
        sessions[map_id].finalized = True
        return info(map_id, sessions[map_id])

    @app.post("/maps/{map_id}/eval")
    def evaluate(map_id: str, body: schemas.EvalRequest):
        s = get(map_id)
        rep = pipeline.eval_report(s.map, load_ground_truth(body.gt), load_table(body.table), s.config)
        return {**s.config.echo(), **rep.to_dict()}

    return app
