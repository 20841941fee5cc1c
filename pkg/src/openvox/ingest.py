"""Per-frame detection assembly: mask filtering, projection, denoising, voxelization, features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import PointCloud, dbscan_filter, estimate_normals, project_depth, subvoxel_representatives, voxelize
from .instance_map import Detection
from .semantics import (
    COVER_MIN,
    SemanticFeature,
    aggregate_by_coverage,
    compute_distinctiveness,
    mean_distinctiveness,
    patch_coverage,
    quality,
    s_angle,
    s_dist,
    s_sem,
    s_size,
)
from .tensor_io import FrameRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskFilterConfig:
    min_confidence: float = 0.5
    max_aspect: float = 10.0
    min_area: int = 400

    def __post_init__(self):
        if not 0 <= self.min_confidence <= 1:
            raise ValidationError("min_confidence must lie in [0, 1]")
        if self.max_aspect <= 1:
            raise ValidationError("max_aspect must exceed 1")
        if self.min_area < 0:
            raise ValidationError("min_area must be non-negative")


@dataclass(frozen=True)
class IngestConfig:
    resolution: float = 0.05
    d_min: float = 0.1
    d_max: float = 10.0
    dbscan_eps: float | None = None  # defaults to 2 * resolution
    dbscan_min_pts: int = 8
    normal_k: int = 8
    # points are thinned to one per (resolution / dedup_factor) cell before DBSCAN; 0 disables
    dedup_factor: int = 2
    cover_min: float = COVER_MIN
    masks: MaskFilterConfig = field(default_factory=MaskFilterConfig)

    @property
    def eps(self) -> float:
        return self.dbscan_eps if self.dbscan_eps is not None else 2.0 * self.resolution


@dataclass
class Segment:
    index: int
    mask: np.ndarray
    confidence: float
    area: int = 0
    aspect: float = 1.0


@dataclass
class Drop:
    mask_index: int
    reason: str


def mask_geometry(mask: np.ndarray) -> tuple[int, float]:
    """Pixel area and bounding-box aspect ratio (long side / short side)."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return 0, float("inf")
    cols = np.flatnonzero(mask.any(axis=0))
    h = int(rows[-1] - rows[0] + 1)
    w = int(cols[-1] - cols[0] + 1)
    return int(np.count_nonzero(mask)), max(h, w) / min(h, w)


def filter_masks(segments: list[Segment], config: MaskFilterConfig) -> tuple[list[Segment], list[Drop]]:
    kept, drops = [], []
    for seg in segments:
        if seg.confidence < config.min_confidence:
            drops.append(Drop(seg.index, "low confidence"))
        elif seg.aspect > config.max_aspect:
            drops.append(Drop(seg.index, "extreme aspect ratio"))
        elif seg.area < config.min_area:
            drops.append(Drop(seg.index, "insufficient area"))
        else:
            kept.append(seg)
    return kept, drops


def frame_segments(frame: FrameRecord) -> list[Segment]:
    out = []
    for i in range(frame.masks.shape[0]):
        m = frame.masks[i].astype(bool)
        area, aspect = mask_geometry(m)
        out.append(Segment(i, m, float(frame.confidences[i]), area, aspect))
    return out


def build_detections(frame: FrameRecord, config: IngestConfig | None = None) -> tuple[list[Detection], list[Drop]]:
    """Turn every valid mask of ``frame`` into a Detection; failures drop the segment, not the frame."""
    config = config or IngestConfig()
    frame.validate()
    segments, drops = filter_masks(frame_segments(frame), config.masks)
    if not segments:
        return [], drops
    distinct = compute_distinctiveness(frame.patch_grid)
    cam = np.asarray(frame.pose, dtype=np.float64)[:3, 3]
    h, w = frame.intrinsics.height, frame.intrinsics.width
    detections = []
    for seg in segments:
        cloud = project_depth(seg.mask, frame.depth, frame.intrinsics, frame.pose, config.d_min, config.d_max)
        if len(cloud) == 0:
            drops.append(Drop(seg.index, "no valid depth"))
            continue
        if config.dedup_factor > 0:
            cloud = subvoxel_representatives(cloud, config.resolution / config.dedup_factor)
        cloud = dbscan_filter(cloud, config.eps, config.dbscan_min_pts)
        if len(cloud) == 0:
            drops.append(Drop(seg.index, "dbscan removed all points"))
            continue
        voxels = voxelize(cloud, config.resolution)
        centers = voxels.centers()
        with_normals = estimate_normals(PointCloud(centers), config.normal_k, cam)
        rays = centers - cam
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        cover = patch_coverage(seg.mask, frame.patch_size)
        try:
            vec = aggregate_by_coverage(frame.patch_grid, cover, distinct, config.cover_min)
            tracking = aggregate_by_coverage(frame.tracking_grid, cover, None, config.cover_min)
        except ValidationError:
            drops.append(Drop(seg.index, "empty mask"))
            continue
        mean_d = mean_distinctiveness(distinct, cover)
        qb = quality(s_size(seg.area, h, w), s_angle(with_normals.normals, rays),
                     s_sem(vec, frame.global_embedding), s_dist(mean_d), seg.area, mean_d)
        detections.append(Detection(voxels, with_normals.normals, SemanticFeature(vec, qb), tracking,
                                    frame.frame_id, seg.index, seg.area))
    for d in drops:
        log.debug("frame %d mask %d dropped: %s", frame.frame_id, d.mask_index, d.reason)
    return detections, drops
