"""Run configuration: one file (JSON or YAML), dotted flag overrides on top."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ValidationError
from .ingest import IngestConfig, MaskFilterConfig
from .instance_map import AssociationConfig
from .tensor_io import FORMAT_VERSION
from .trajgen.coverage import CoverageCamera


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class AssociationSection(Section):
    tau_geo: float = Field(0.3, gt=0, le=1)
    tau_vis: float = Field(0.8, gt=-1, le=1)
    margin: float = Field(0.1, ge=0)
    min_voxels: int = Field(10, ge=0)


class MaskSection(Section):
    min_confidence: float = Field(0.5, ge=0, le=1)
    max_aspect: float = Field(10.0, gt=1)
    min_area: int = Field(400, ge=0)


class DbscanSection(Section):
    eps: float | None = Field(None, gt=0)  # None means twice the voxel resolution
    min_pts: int = Field(8, ge=1)
    dedup_factor: int = Field(2, ge=0)


class IngestSection(Section):
    d_min: float = Field(0.1, ge=0)
    d_max: float = Field(10.0, gt=0)
    normal_k: int = Field(8, ge=3)
    cover_min: float = Field(0.25, gt=0, le=1)


class EvalSection(Section):
    d_assign: float | None = Field(None, gt=0)  # None means five voxel widths
    ks: list[int] = Field(default_factory=lambda: [1, 5])
    strict: bool = False


class FrustumSection(Section):
    width: int = Field(64, ge=1)
    height: int = Field(64, ge=1)
    hfov_deg: float = Field(90.0, gt=0, lt=180)
    max_range: float = Field(10.0, gt=0)


class SynthSection(Section):
    rooms: int = Field(1, ge=1)
    boxes_per_room: int = Field(10, ge=0)
    n_classes: int = Field(10, ge=1)
    feature_dim: int = Field(32, ge=2)
    tracking_dim: int = Field(32, ge=2)
    room_size: float = Field(3.0, gt=0)
    frames: int = Field(200, ge=0)
    orbit_radius: float = Field(2.5, gt=0)
    camera_height: float = 1.2
    image_size: int = Field(336, ge=14)
    hfov_deg: float = Field(60.0, gt=0, lt=180)
    patch_size: int = Field(14, ge=1)
    depth_sigma: float = Field(0.01, ge=0)
    feature_sigma: float = Field(0.05, ge=0)
    mask_dropout: float = Field(0.0, ge=0, lt=1)


class TrajgenSection(Section):
    cell: float = Field(0.05, gt=0)
    clearance: float = Field(0.2, ge=0)
    sample_spacing: float = Field(0.05, gt=0)


class RunConfig(Section):
    resolution: float = Field(0.05, gt=0)
    seed: int = Field(0, ge=0)
    association: AssociationSection = Field(default_factory=AssociationSection)
    masks: MaskSection = Field(default_factory=MaskSection)
    dbscan: DbscanSection = Field(default_factory=DbscanSection)
    ingest: IngestSection = Field(default_factory=IngestSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    frustum: FrustumSection = Field(default_factory=FrustumSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    trajgen: TrajgenSection = Field(default_factory=TrajgenSection)

    @model_validator(mode="after")
    def _depth_range(self):
        if self.ingest.d_min >= self.ingest.d_max:
            raise ValueError("ingest.d_min must be below ingest.d_max")
        if self.synth.image_size % self.synth.patch_size:
            raise ValueError("synth.image_size must be a multiple of synth.patch_size")
        return self

    # -- conversions to the library configs -------------------------------------

    def association_config(self) -> AssociationConfig:
        return AssociationConfig(**self.association.model_dump())

    def ingest_config(self) -> IngestConfig:
        return IngestConfig(resolution=self.resolution, d_min=self.ingest.d_min, d_max=self.ingest.d_max,
                            dbscan_eps=self.dbscan.eps, dbscan_min_pts=self.dbscan.min_pts,
                            normal_k=self.ingest.normal_k, dedup_factor=self.dbscan.dedup_factor,
                            cover_min=self.ingest.cover_min, masks=MaskFilterConfig(**self.masks.model_dump()))

    def coverage_camera(self) -> CoverageCamera:
        return CoverageCamera(**self.frustum.model_dump())

    def echo(self) -> dict:
        return {"format_version": FORMAT_VERSION, "config": self.model_dump(mode="json"),
                "config_hash": self.digest()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()).hexdigest()


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Config file (JSON or YAML, unknown keys rejected) with overrides applied last."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"config file {path} does not parse: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError("config file must hold a mapping")
    data = apply_overrides(data, overrides or [])
    try:
        return RunConfig.model_validate(data)
    except Exception as exc:  # pydantic's error, re-raised as ours so callers map one type
        raise ValidationError(f"invalid config: {exc}") from exc
