"""Seeded box scenes rendered into FrameRecords with exact ground truth.

Stands in for the segmentation and feature models: masks are the true
first-hit instance labels, patch features are pixel-share mixtures of class
prototypes, and tracking features mix per-instance identity vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import Intrinsics, VoxelSet, voxelize
from .tensor_io import (
    FrameRecord,
    GroundTruth,
    GtInstance,
    TextEmbeddingTable,
    frame_dir,
    save_frame,
    save_ground_truth,
    save_table,
    write_json,
    write_trajectory_index,
)


@dataclass
class Box:
    center: np.ndarray
    extents: np.ndarray
    cls: int
    region: int = 0

    @property
    def min(self) -> np.ndarray:
        return self.center - 0.5 * self.extents

    @property
    def max(self) -> np.ndarray:
        return self.center + 0.5 * self.extents

    def to_dict(self) -> dict:
        return {"center": [float(v) for v in self.center], "extents": [float(v) for v in self.extents],
                "class": int(self.cls), "region": int(self.region)}


@dataclass
class SyntheticScene:
    seed: int
    boxes: list[Box]
    prototypes: np.ndarray  # C x Df, unit rows
    background: np.ndarray  # Df
    identities: np.ndarray  # n_boxes x Dt
    background_identity: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]
    class_names: list[str] = field(default_factory=list)
    region_centers: list[np.ndarray] = field(default_factory=list)

    @property
    def centroid(self) -> np.ndarray:
        if not self.boxes:
            return 0.5 * (self.bounds[0] + self.bounds[1])
        return np.mean([b.center for b in self.boxes], axis=0)

    def table(self) -> TextEmbeddingTable:
        return TextEmbeddingTable(self.class_names, self.prototypes.astype(np.float32))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "boxes": [b.to_dict() for b in self.boxes],
                "bounds": [[float(v) for v in self.bounds[0]], [float(v) for v in self.bounds[1]]],
                "class_names": self.class_names}


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0
    feature_sigma: float = 0.0
    mask_dropout: float = 0.0

    def __post_init__(self):
        if self.depth_sigma < 0 or self.feature_sigma < 0:
            raise ValidationError("noise sigmas must be non-negative")
        if not 0 <= self.mask_dropout < 1:
            raise ValidationError("mask dropout must lie in [0, 1)")


def make_prototypes(rng: np.random.Generator, count: int, dim: int, max_cos: float = 0.2) -> np.ndarray:
    """Orthonormalized Gaussian vectors; rows are rejected and redrawn while any pair exceeds ``max_cos``."""
    if count > dim:
        raise ValidationError(f"cannot make {count} near-orthogonal prototypes in {dim} dims")
    while True:
        q, _ = np.linalg.qr(rng.standard_normal((dim, count)))
        protos = q.T
        gram = protos @ protos.T
        np.fill_diagonal(gram, 0.0)
        if np.abs(gram).max() <= max_cos:
            return protos.astype(np.float32)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _place_boxes(rng: np.random.Generator, n: int, lo: np.ndarray, hi: np.ndarray, n_classes: int,
                 region: int, size_range: tuple[float, float], gap: float, start_cls: int) -> list[Box]:
    # a layout that gets stuck is thrown away and redrawn from scratch
    for _ in range(200):
        boxes: list[Box] = []
        misses = 0
        while len(boxes) < n and misses < 500:
            ext = rng.uniform(size_range[0], size_range[1], size=3)
            xy = rng.uniform(lo[:2] + ext[:2] / 2, hi[:2] - ext[:2] / 2)
            center = np.array([xy[0], xy[1], ext[2] / 2])
            cand = Box(center, ext, (start_cls + len(boxes)) % n_classes, region)
            if all(np.any(cand.min[:2] > b.max[:2] + gap) or np.any(b.min[:2] > cand.max[:2] + gap) for b in boxes):
                boxes.append(cand)
            else:
                misses += 1
        if len(boxes) == n:
            return boxes
    raise ValidationError("could not place boxes without overlap; enlarge the room")


def make_scene(seed: int, n_boxes: int = 10, n_classes: int = 10, feature_dim: int = 32,
               tracking_dim: int = 32, room: float = 3.0, size_range: tuple[float, float] = (0.3, 0.6),
               gap: float = 0.3) -> SyntheticScene:
    """A square room centred on the origin with ``n_boxes`` boxes standing on the floor."""
    return make_multiroom_scene(seed, 1, n_boxes, n_classes, feature_dim, tracking_dim, room, 0.0,
                                size_range, gap)


def make_multiroom_scene(seed: int, rooms: int, boxes_per_room: int, n_classes: int = 10,
                         feature_dim: int = 32, tracking_dim: int = 32, room: float = 3.0,
                         spacing: float = 30.0, size_range: tuple[float, float] = (0.3, 0.6),
                         gap: float = 0.3) -> SyntheticScene:
    """Rooms laid out on a square grid ``spacing`` metres apart, far enough that none sees another."""
    rng = np.random.default_rng(seed)
    protos = make_prototypes(rng, n_classes + 1, feature_dim)
    cols = max(1, math.ceil(math.sqrt(rooms)))
    boxes: list[Box] = []
    centers = []
    for r in range(rooms):
        c = np.array([(r % cols) * spacing, (r // cols) * spacing, 0.0])
        centers.append(c)
        half = np.array([room / 2, room / 2, 0.0])
        boxes += _place_boxes(rng, boxes_per_room, c - half, c + half, n_classes, r, size_range, gap,
                              start_cls=r * boxes_per_room)
    ident = _unit_rows(rng.standard_normal((len(boxes) + 1, tracking_dim))).astype(np.float32)
    lo = np.min([c for c in centers], axis=0) - np.array([room / 2, room / 2, 0.0])
    hi = np.max([c for c in centers], axis=0) + np.array([room / 2, room / 2, size_range[1]])
    return SyntheticScene(seed, boxes, protos[:n_classes], protos[n_classes], ident[:-1], ident[-1], (lo, hi),
                          [f"class_{k:02d}" for k in range(n_classes)], centers)


def default_intrinsics(size: int = 168, hfov_deg: float = 90.0) -> Intrinsics:
    f = (size / 2) / math.tan(math.radians(hfov_deg) / 2)
    c = (size - 1) / 2
    return Intrinsics(f, f, c, c, size, size)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose with camera x right, y down, z forward."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    return pose


def orbit_trajectory(center, n_frames: int, radius: float, height: float = 1.2,
                     phase: float = 0.0) -> list[np.ndarray]:
    """``n_frames`` poses evenly spaced on a circle, ``height`` above ``center``, all looking at it."""
    if radius <= 0:
        raise ValidationError("orbit radius must be positive")
    if n_frames < 1:
        raise ValidationError("need at least one frame")
    c = np.asarray(center.centroid if isinstance(center, SyntheticScene) else center, dtype=np.float64)
    poses = []
    for k in range(n_frames):
        th = phase + 2 * math.pi * k / n_frames
        eye = c + np.array([radius * math.cos(th), radius * math.sin(th), height])
        poses.append(look_at(eye, c))
    return poses


def multiroom_trajectory(scene: SyntheticScene, n_frames: int, radius: float = 2.5,
                         height: float = 1.2) -> list[np.ndarray]:
    """Visit the rooms in order, orbiting each one for an equal share of the frames."""
    rooms = len(scene.region_centers)
    poses: list[np.ndarray] = []
    for r in range(rooms):
        n = n_frames // rooms + (1 if r < n_frames % rooms else 0)
        boxes = [b.center for b in scene.boxes if b.region == r]
        c = np.mean(boxes, axis=0) if boxes else scene.region_centers[r]
        poses += orbit_trajectory(c, n, radius, height)
    return poses


def _ray_dirs(intr: Intrinsics) -> np.ndarray:
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=np.float64)], -1)


def render_labels(scene: SyntheticScene, pose: np.ndarray, intr: Intrinsics,
                  max_range: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """First-hit z-depth and box index per pixel (-1 and 0 depth where nothing is hit)."""
    pose = np.asarray(pose, dtype=np.float64)
    rot, eye = pose[:3, :3], pose[:3, 3]
    h, w = intr.height, intr.width
    dirs = (_ray_dirs(intr) @ rot.T).reshape(-1, 3)  # z-depth parametrisation: t equals depth
    depth = np.full(h * w, np.inf)
    label = np.full(h * w, -1, dtype=np.int64)
    for b, box in enumerate(scene.boxes):
        rows, cols = _pixel_window(box, rot, eye, intr, max_range)
        if rows is None:
            continue
        idx = (rows[:, None] * w + cols[None, :]).ravel()
        d = dirs[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (box.min - eye) * inv
            t1 = (box.max - eye) * inv
            tnear = np.nanmax(np.minimum(t0, t1), axis=1)
            tfar = np.nanmin(np.maximum(t0, t1), axis=1)
        hit = (tnear <= tfar) & (tnear > 0) & (tnear < depth[idx])
        depth[idx[hit]] = tnear[hit]
        label[idx[hit]] = b
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(h, w), label.reshape(h, w)


def _pixel_window(box: Box, rot: np.ndarray, eye: np.ndarray, intr: Intrinsics, max_range: float):
    """Conservative pixel rows/cols a box can cover, or (None, None) when it is out of view."""
    corners = np.array([[x, y, z] for x in (box.min[0], box.max[0]) for y in (box.min[1], box.max[1])
                        for z in (box.min[2], box.max[2])])
    cam = (corners - eye) @ rot
    if np.all(cam[:, 2] <= 0) or np.min(np.linalg.norm(cam, axis=1)) > max_range * 2:
        return None, None
    if np.any(cam[:, 2] <= 1e-6):
        return np.arange(intr.height), np.arange(intr.width)
    u = cam[:, 0] / cam[:, 2] * intr.fx + intr.cx
    v = cam[:, 1] / cam[:, 2] * intr.fy + intr.cy
    c0, c1 = max(int(np.floor(u.min())) - 1, 0), min(int(np.ceil(u.max())) + 1, intr.width - 1)
    r0, r1 = max(int(np.floor(v.min())) - 1, 0), min(int(np.ceil(v.max())) + 1, intr.height - 1)
    if c0 > c1 or r0 > r1:
        return None, None
    return np.arange(r0, r1 + 1), np.arange(c0, c1 + 1)


def _patch_shares(label: np.ndarray, ids: np.ndarray, patch: int) -> np.ndarray:
    """Share of each patch's pixels per entry of ``ids`` (last column is background)."""
    h, w = label.shape
    onehot = np.concatenate([label[..., None] == ids[None, None, :], (label < 0)[..., None]], axis=-1)
    blocks = onehot.reshape(h // patch, patch, w // patch, patch, -1).astype(np.float64)
    return blocks.mean(axis=(1, 3))


def render_frame(scene: SyntheticScene, pose: np.ndarray, intrinsics: Intrinsics, noise: NoiseModel,
                 rng: np.random.Generator, frame_id: int = 0, patch_size: int = 14) -> FrameRecord:
    if intrinsics.width % patch_size or intrinsics.height % patch_size:
        raise ValidationError("image size must be a multiple of the patch size")
    pose = np.asarray(pose, dtype=np.float32).astype(np.float64)
    depth, label = render_labels(scene, pose, intrinsics)
    hit = label >= 0
    if noise.depth_sigma > 0:
        depth = depth + np.where(hit, rng.normal(0.0, noise.depth_sigma, depth.shape), 0.0)
    visible = np.unique(label[hit])
    keep = [b for b in visible if not (noise.mask_dropout > 0 and rng.random() < noise.mask_dropout)]
    masks = np.stack([label == b for b in keep]).astype(np.uint8) if keep else \
        np.zeros((0, intrinsics.height, intrinsics.width), dtype=np.uint8)
    conf = rng.uniform(0.6, 1.0, size=len(keep)).astype(np.float32)

    shares = _patch_shares(label, visible, patch_size)
    classes = np.array([scene.boxes[b].cls for b in visible], dtype=np.int64)
    sem_basis = np.concatenate([scene.prototypes[classes].reshape(-1, scene.prototypes.shape[1]),
                                scene.background[None]], axis=0).astype(np.float64)
    patch = shares @ sem_basis
    inst_share = shares[..., :-1]
    trk_basis = scene.identities[visible].reshape(-1, scene.identities.shape[1]).astype(np.float64)
    tracking = inst_share @ trk_basis
    empty = inst_share.sum(axis=-1) == 0
    tracking[empty] = scene.background_identity
    if noise.feature_sigma > 0:
        patch = patch + rng.normal(0.0, noise.feature_sigma, patch.shape)
        tracking = tracking + rng.normal(0.0, noise.feature_sigma, tracking.shape)
    counts = np.array([np.count_nonzero(label == b) for b in visible], dtype=np.float64)
    if counts.size:
        glob = counts @ scene.prototypes[classes].astype(np.float64)
    else:
        glob = scene.background.astype(np.float64)
    return FrameRecord(
        frame_id=frame_id,
        pose=pose,
        intrinsics=intrinsics,
        depth=depth.astype(np.float32),
        masks=masks,
        confidences=conf,
        patch_grid=_unit_rows(patch).astype(np.float32),
        tracking_grid=_unit_rows(tracking).astype(np.float32),
        global_embedding=(glob / np.linalg.norm(glob)).astype(np.float32),
        patch_size=patch_size,
    )


def frame_rng(seed: int, frame_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, frame_id])


def render_sequence(scene: SyntheticScene, poses: list[np.ndarray], intrinsics: Intrinsics,
                    noise: NoiseModel, patch_size: int = 14):
    """Yield frames; each frame has its own rng stream so frames are independently reproducible."""
    for k, pose in enumerate(poses):
        yield render_frame(scene, pose, intrinsics, noise, frame_rng(scene.seed, k), k, patch_size)


def surface_points(box: Box, spacing: float) -> np.ndarray:
    """Grid samples on all six faces, endpoints included, no gap wider than ``spacing``."""
    lo, hi = box.min, box.max
    axes = [np.linspace(lo[a], hi[a], max(2, int(math.ceil((hi[a] - lo[a]) / spacing)) + 1)) for a in range(3)]
    pts = []
    for a in range(3):
        b, c = [x for x in range(3) if x != a]
        gb, gc = np.meshgrid(axes[b], axes[c], indexing="ij")
        for val in (lo[a], hi[a]):
            p = np.empty((gb.size, 3))
            p[:, a] = val
            p[:, b] = gb.ravel()
            p[:, c] = gc.ravel()
            pts.append(p)
    return np.unique(np.concatenate(pts), axis=0)


def export_ground_truth(scene: SyntheticScene, resolution: float, point_spacing: float | None = None) -> GroundTruth:
    spacing = point_spacing or resolution
    pts, labels, insts = [], [], []
    for i, box in enumerate(scene.boxes):
        dense = surface_points(box, resolution / 2)
        insts.append(GtInstance(i, box.cls, voxelize(dense, resolution), box.region))
        p = surface_points(box, spacing)
        pts.append(p)
        labels.append(np.full(len(p), box.cls, dtype=np.int64))
    if pts:
        return GroundTruth(np.concatenate(pts).astype(np.float32), np.concatenate(labels), insts, resolution)
    return GroundTruth(np.empty((0, 3), dtype=np.float32), np.empty(0, dtype=np.int64), [], resolution)


def write_synthetic_trajectory(directory: str | Path, scene: SyntheticScene, poses: list[np.ndarray],
                               intrinsics: Intrinsics, noise: NoiseModel, resolution: float,
                               patch_size: int = 14) -> Path:
    """Frames, ground truth, class table and scene description in the trajectory layout."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = []
    for frame in render_sequence(scene, poses, intrinsics, noise, patch_size):
        save_frame(frame, frame_dir(d, frame.frame_id))
        ids.append(frame.frame_id)
    save_ground_truth(export_ground_truth(scene, resolution), d / "gt")
    save_table(scene.table(), d / "table")
    write_json(scene.to_dict(), d / "scene.json")
    write_trajectory_index(d, ids, {"scene": "scene.json", "ground_truth": "gt", "table": "table",
                                    "noise": {"depth_sigma": noise.depth_sigma,
                                              "feature_sigma": noise.feature_sigma,
                                              "mask_dropout": noise.mask_dropout}})
    return d


def scene_from_dict(data: dict) -> list[Box]:
    return [Box(np.asarray(b["center"], dtype=np.float64), np.asarray(b["extents"], dtype=np.float64),
                int(b["class"]), int(b.get("region", 0))) for b in data["boxes"]]


def scene_voxel_labels(boxes: list[Box], resolution: float) -> dict[int, VoxelSet]:
    return {i: voxelize(surface_points(b, resolution / 2), resolution) for i, b in enumerate(boxes)}
