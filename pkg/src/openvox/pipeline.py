"""End-to-end runs shared by the CLI and the HTTP service."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .config import RunConfig
from .errors import ValidationError
from .ingest import build_detections
from .instance_map import FinalReport, InstanceMap
from .retrieval import EvalReport, evaluate, rank_instances
from .synthbench import (
    NoiseModel,
    SyntheticScene,
    default_intrinsics,
    make_multiroom_scene,
    multiroom_trajectory,
    scene_from_dict,
    scene_voxel_labels,
    write_synthetic_trajectory,
)
from .tensor_io import FORMAT_VERSION, FrameRecord, load_frame, read_json, read_trajectory_index
from .trajgen import (
    CoverageReport,
    OccupancyGrid,
    build_place_graph,
    camera_poses,
    chinese_postman,
    coverage_analysis,
    largest_component,
    smooth_trajectory,
)
from .trajgen.motion import AgentTrajectory

log = logging.getLogger(__name__)


def new_map(cfg: RunConfig) -> InstanceMap:
    return InstanceMap(cfg.resolution, cfg.association_config())


@dataclass
class FrameLog:
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
    drop_reasons: dict = field(default_factory=dict)


def process_frame(m: InstanceMap, frame: FrameRecord, cfg: RunConfig) -> FrameLog:
    """Detections for one frame fused into ``m``; the wall time covers ingest plus association."""
    t0 = time.perf_counter()
    dets, drops = build_detections(frame, cfg.ingest_config())
    rep = m.associate_frame(dets, frame.frame_id)
    wall = (time.perf_counter() - t0) * 1000.0
    stats = m.stats()
    reasons: dict[str, int] = {}
    for d in drops:
        reasons[d.reason] = reasons.get(d.reason, 0) + 1
    return FrameLog(frame.frame_id, rep.detections, len(drops), rep.matched, rep.created, rep.merged,
                    stats["instance_count"], stats["voxel_count"], stats["memory_bytes"], wall, reasons)


@dataclass
class MapRun:
    map: InstanceMap
    frames: list[FrameLog]
    final: FinalReport


def run_mapping(frames: Iterable[FrameRecord], cfg: RunConfig, log_file: TextIO | None = None,
                m: InstanceMap | None = None) -> MapRun:
    """Frames are consumed in the given order; the map is finalised at the end."""
    m = m or new_map(cfg)
    logs = []
    for frame in frames:
        entry = process_frame(m, frame, cfg)
        logs.append(entry)
        if log_file is not None:
            log_file.write(json.dumps({"event": "frame", **asdict(entry)}) + "\n")
    t0 = time.perf_counter()
    final = m.finalize()
    if log_file is not None:
        log_file.write(json.dumps({"event": "finalize", "merged": final.merged, "removed": final.removed,
                                   "instances": len(m), "wall_ms": (time.perf_counter() - t0) * 1000.0}) + "\n")
    return MapRun(m, logs, final)


def trajectory_frames(directory: str | Path) -> Iterable[FrameRecord]:
    for manifest in read_trajectory_index(directory):
        yield load_frame(manifest)


# -- synthetic data ------------------------------------------------------------------


def synth_scene(cfg: RunConfig) -> SyntheticScene:
    s = cfg.synth
    return make_multiroom_scene(cfg.seed, s.rooms, s.boxes_per_room, s.n_classes, s.feature_dim, s.tracking_dim,
                                s.room_size)


def synth_poses(cfg: RunConfig, scene: SyntheticScene) -> list[np.ndarray]:
    s = cfg.synth
    return multiroom_trajectory(scene, s.frames, s.orbit_radius, s.camera_height)


def synth_noise(cfg: RunConfig) -> NoiseModel:
    s = cfg.synth
    return NoiseModel(s.depth_sigma, s.feature_sigma, s.mask_dropout)


def synth_intrinsics(cfg: RunConfig):
    return default_intrinsics(cfg.synth.image_size, cfg.synth.hfov_deg)


def write_synth(cfg: RunConfig, out: str | Path, poses: list[np.ndarray] | None = None) -> Path:
    scene = synth_scene(cfg)
    poses = synth_poses(cfg, scene) if poses is None else poses
    return write_synthetic_trajectory(out, scene, poses, synth_intrinsics(cfg), synth_noise(cfg), cfg.resolution,
                                      cfg.synth.patch_size)


# -- query and evaluation ------------------------------------------------------------


def query_report(m: InstanceMap, query: np.ndarray, k: int | None, label: str = "query") -> dict:
    rows = []
    for rank, (iid, cos) in enumerate(rank_instances(m, query, k), start=1):
        inst = m.instances[iid]
        rows.append({"rank": rank, "instance": iid, "cosine": cos,
                     "centroid": [float(v) for v in inst.voxels.centers().mean(axis=0)],
                     "voxels": len(inst.voxels)})
    return {"query": label, "k": k, "results": rows}


def eval_report(m: InstanceMap, gt, table, cfg: RunConfig) -> EvalReport:
    return evaluate(m, gt, table, cfg.eval.ks, cfg.eval.d_assign)


# -- trajectories and coverage ----------------------------------------------------------


@dataclass
class TrajgenResult:
    grid: OccupancyGrid
    island_ratio: float
    graph: object
    tour: object
    trajectory: AgentTrajectory


def run_trajgen(grid: OccupancyGrid, cfg: RunConfig) -> TrajgenResult:
    g, ratio = largest_component(grid)
    graph = build_place_graph(g)
    tour = chinese_postman(graph.n, graph.edges)
    traj = smooth_trajectory(g, graph, tour, cfg.trajgen.sample_spacing)
    if not traj.complete:
        log.warning("trajectory hit the step cap before reaching the tour's end")
    return TrajgenResult(g, ratio, graph, tour, traj)


def scene_instances(scene_data: dict, resolution: float) -> tuple[dict, dict, dict]:
    """Surface voxels, category names and regions for every box of a scene description."""
    boxes = scene_from_dict(scene_data)
    names = scene_data.get("class_names") or []
    vox = scene_voxel_labels(boxes, resolution)
    cats = {i: names[b.cls] if b.cls < len(names) else str(b.cls) for i, b in enumerate(boxes)}
    regions = {i: b.region for i, b in enumerate(boxes)}
    return vox, cats, regions


def run_coverage(scene_data: dict, traj: AgentTrajectory, cfg: RunConfig,
                 max_poses: int | None = None) -> CoverageReport:
    vox, cats, regions = scene_instances(scene_data, cfg.resolution)
    if not vox:
        raise ValidationError("scene has no instances")
    poses = camera_poses(traj)
    if max_poses is not None and len(poses) > max_poses:
        stride = math.ceil(len(poses) / max_poses)
        poses = poses[::stride]
    return coverage_analysis(vox, poses, cats, regions, cfg.coverage_camera())


def report_header(cfg: RunConfig, command: str) -> dict:
    return {"command": command, **cfg.echo()}


def load_scene_file(path: str | Path) -> dict:
    data = read_json(path)
    if "boxes" not in data:
        raise ValidationError(f"{path} is not a scene description")
    return data


__all__ = ["FORMAT_VERSION", "FrameLog", "MapRun", "new_map", "process_frame", "run_mapping", "trajectory_frames",
           "synth_scene", "synth_poses", "synth_noise", "synth_intrinsics", "write_synth", "query_report",
           "eval_report", "run_trajgen", "run_coverage", "scene_instances", "report_header", "load_scene_file"]
