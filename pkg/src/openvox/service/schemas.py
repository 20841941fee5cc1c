from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


class CreateMap(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict, description="RunConfig fields; omitted ones take defaults")


class MapInfo(BaseModel):
    map_id: str
    resolution: float
    instance_count: int
    voxel_count: int
    memory_bytes: int
    frames: int
    finalized: bool


class PathRequest(BaseModel):
    path: str


class FrameResult(BaseModel):
    frame_id: int
    detections: int
    dropped: int
    matched: int
    created: int
    merged: int
    instances: int
    voxels: int
    memory_bytes: int
    wall_ms: float
    drop_reasons: dict[str, int] = Field(default_factory=dict)


class TrajectoryResult(BaseModel):
    frames: int
    instance_count: int
    median_wall_ms: float


class FinalizeResult(BaseModel):
    merged: int
    removed: int
    instance_count: int


class QueryRequest(BaseModel):
    embedding: list[float]
    k: int | None = Field(None, ge=1)


class QueryHit(BaseModel):
    rank: int
    instance: int
    cosine: float
    centroid: list[float]
    voxels: int


class QueryResult(BaseModel):
    results: list[QueryHit]


class EvalRequest(BaseModel):
    gt: str
    table: str


class ErrorBody(BaseModel):
    error: str
    kind: str
