"""Persistent object map with voxel-overlap association and merge refinement.

AABBs only ever nominate candidates; every association or merge decision is
taken on exact voxel intersections plus tracking-feature cosine similarity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import Aabb, Bvh, VoxelSet, voxel_overlap
from .semantics import SemanticFeature, fuse_semantic


@dataclass(frozen=True)
class AssociationConfig:
    tau_geo: float = 0.3
    tau_vis: float = 0.8
    margin: float = 0.1
    min_voxels: int = 10

    def __post_init__(self):
        if not 0 < self.tau_geo <= 1:
            raise ValidationError("tau_geo must lie in (0, 1]")
        if not -1 < self.tau_vis <= 1:
            raise ValidationError("tau_vis must lie in (-1, 1]")
        if self.margin < 0 or self.min_voxels < 0:
            raise ValidationError("margin and min_voxels must be non-negative")


@dataclass
class Detection:
    voxels: VoxelSet
    normals: np.ndarray
    semantic: SemanticFeature
    tracking: np.ndarray
    frame_id: int
    mask_index: int = 0
    mask_area: int = 0

    def __post_init__(self):
        if len(self.voxels) == 0:
            raise ValidationError("detection has an empty voxel set")


@dataclass
class Instance:
    id: int
    voxels: VoxelSet
    semantic: SemanticFeature
    tracking: np.ndarray
    obs_count: int = 1
    last_seen: int = 0
    _aabb: Aabb | None = field(default=None, repr=False)

    @property
    def aabb(self) -> Aabb:
        if self._aabb is None:
            self._aabb = self.voxels.aabb()
        return self._aabb

    def set_voxels(self, voxels: VoxelSet) -> None:
        self.voxels = voxels
        self._aabb = None

    def nbytes(self) -> int:
        return (self.voxels.nbytes() + self.semantic.vector.nbytes + self.tracking.nbytes
                + 9 * 4 + 3 * 8 + 6 * 8)


@dataclass
class FrameReport:
    frame_id: int
    detections: int = 0
    matched: int = 0
    created: int = 0
    merged: int = 0
    active: int = 0
    created_ids: list[int] = field(default_factory=list)
    merge_pairs: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class FinalReport:
    merged: int = 0
    removed: int = 0
    merge_pairs: list[tuple[int, int]] = field(default_factory=list)
    removed_ids: list[int] = field(default_factory=list)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return (v / n).astype(np.float32) if n > 0 else v.astype(np.float32)


def tracking_cos(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def fuse_tracking(a: np.ndarray, na: int, b: np.ndarray, nb: int) -> np.ndarray:
    return _unit(na * a.astype(np.float64) + nb * b.astype(np.float64))


class InstanceMap:
    """Instances by id plus a lazily rebuilt BVH over their bounds.

    Instances changed since the last BVH build sit in a small pending set that
    queries scan linearly; the tree is rebuilt once that set grows past a
    fraction of the map, which keeps the amortised cost per change logarithmic.
    """

    def __init__(self, resolution: float, config: AssociationConfig | None = None):
        if resolution <= 0:
            raise ValidationError("resolution must be positive")
        self.resolution = float(resolution)
        self.config = config or AssociationConfig()
        self.instances: dict[int, Instance] = {}
        self.next_id = 0
        self._bvh = Bvh([], np.empty((0, 3)), np.empty((0, 3)))
        self._pending: set[int] = set()
        self._stale: set[int] = set()

    # -- bookkeeping -------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.instances)

    def config_hash(self) -> str:
        payload = json.dumps({"resolution": self.resolution, **asdict(self.config)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def _touch(self, iid: int) -> None:
        self._pending.add(iid)
        self._stale.add(iid)

    def _drop(self, iid: int) -> None:
        del self.instances[iid]
        self._pending.discard(iid)
        self._stale.add(iid)

    def rebuild_bvh(self) -> None:
        self._bvh = Bvh.from_boxes({i: inst.aabb for i, inst in self.instances.items()})
        self._pending.clear()
        self._stale.clear()

    def _maybe_rebuild(self) -> None:
        if len(self._stale) > max(16, len(self.instances) // 4):
            self.rebuild_bvh()

    def bvh(self) -> Bvh:
        """A BVH that reflects the current map exactly."""
        if self._stale:
            self.rebuild_bvh()
        return self._bvh

    def query(self, box: Aabb, margin: float) -> list[int]:
        found = {i for i in self._bvh.query(box, margin) if i not in self._stale}
        qmin, qmax = box.min - margin, box.max + margin
        for i in self._pending:
            b = self.instances[i].aabb
            if np.all(b.min <= qmax) and np.all(qmin <= b.max):
                found.add(i)
        return sorted(found)

    def add(self, inst: Instance) -> None:
        if inst.id in self.instances:
            raise ValidationError(f"duplicate instance id {inst.id}")
        self.instances[inst.id] = inst
        self.next_id = max(self.next_id, inst.id + 1)
        self._touch(inst.id)

    def _new_instance(self, det: Detection) -> Instance:
        inst = Instance(self.next_id, det.voxels, det.semantic, _unit(det.tracking), 1, det.frame_id)
        self.add(inst)
        return inst

    # -- association -------------------------------------------------------------

    def qualifies(self, a: Instance | Detection, b: Instance) -> tuple[bool, float]:
        ov = voxel_overlap(a.voxels, b.voxels)
        if ov.overlap_min < self.config.tau_geo:
            return False, ov.overlap_min
        return tracking_cos(a.tracking, b.tracking) >= self.config.tau_vis, ov.overlap_min

    def _fuse_detection(self, inst: Instance, det: Detection) -> None:
        inst.set_voxels(inst.voxels.union(det.voxels))
        inst.tracking = fuse_tracking(inst.tracking, inst.obs_count, det.tracking, 1)
        inst.semantic = fuse_semantic(inst.semantic, det.semantic)
        inst.obs_count += 1
        inst.last_seen = max(inst.last_seen, det.frame_id)
        self._touch(inst.id)

    def merge_pair(self, keep_id: int, drop_id: int) -> None:
        keep, drop = self.instances[keep_id], self.instances[drop_id]
        keep.set_voxels(keep.voxels.union(drop.voxels))
        keep.tracking = fuse_tracking(keep.tracking, keep.obs_count, drop.tracking, drop.obs_count)
        keep.semantic = fuse_semantic(keep.semantic, drop.semantic)
        keep.obs_count += drop.obs_count
        keep.last_seen = max(keep.last_seen, drop.last_seen)
        self._drop(drop_id)
        self._touch(keep_id)

    def associate_frame(self, detections: list[Detection], frame_id: int | None = None) -> FrameReport:
        for det in detections:
            if det.voxels.resolution != self.resolution:
                raise ValidationError("detection resolution differs from map resolution")
        fid = frame_id if frame_id is not None else (detections[0].frame_id if detections else -1)
        report = FrameReport(fid, detections=len(detections))
        margin = self.config.margin
        active: set[int] = set()
        order = sorted(range(len(detections)), key=lambda i: (-detections[i].mask_area, detections[i].mask_index, i))
        for i in order:
            det = detections[i]
            cands = self.query(det.voxels.aabb(), margin)
            active.update(cands)
            best, best_ov = None, -1.0
            for cid in cands:
                ok, ov = self.qualifies(det, self.instances[cid])
                if ok and ov > best_ov:
                    best, best_ov = cid, ov
            if best is None:
                inst = self._new_instance(det)
                report.created += 1
                report.created_ids.append(inst.id)
                active.add(inst.id)
            else:
                self._fuse_detection(self.instances[best], det)
                report.matched += 1
        report.active = len(active)
        pairs = self._merge_to_fixpoint(sorted(active))
        report.merged = len(pairs)
        report.merge_pairs = pairs
        self._maybe_rebuild()
        return report

    def _merge_to_fixpoint(self, ids: list[int]) -> list[tuple[int, int]]:
        """Merge qualifying pairs among ``ids`` in ascending (a, b) order until none remain."""
        live = [i for i in ids if i in self.instances]
        merged: list[tuple[int, int]] = []
        # pairs already found non-qualifying stay so until either side changes
        clean: set[tuple[int, int]] = set()
        changed = True
        while changed:
            changed = False
            boxes = np.array([np.concatenate([self.instances[i].aabb.min, self.instances[i].aabb.max]) for i in live]).reshape(-1, 6)
            for ai in range(len(live)):
                a = live[ai]
                hit = np.all(boxes[ai, :3] <= boxes[ai + 1:, 3:], axis=1) & np.all(boxes[ai + 1:, :3] <= boxes[ai, 3:], axis=1)
                for off in np.flatnonzero(hit):
                    b = live[ai + 1 + off]
                    if (a, b) in clean:
                        continue
                    ok, _ = self.qualifies(self.instances[b], self.instances[a])
                    if ok:
                        self.merge_pair(a, b)
                        merged.append((a, b))
                        live.remove(b)
                        clean = {p for p in clean if a not in p}
                        changed = True
                        break
                    clean.add((a, b))
                if changed:
                    break
        return merged

    def finalize(self) -> FinalReport:
        report = FinalReport()
        report.merge_pairs = self._merge_to_fixpoint(sorted(self.instances))
        report.merged = len(report.merge_pairs)
        for iid in sorted(self.instances):
            if len(self.instances[iid].voxels) < self.config.min_voxels:
                self._drop(iid)
                report.removed_ids.append(iid)
        report.removed = len(report.removed_ids)
        self.rebuild_bvh()
        return report

    def stats(self) -> dict:
        return map_stats(self)


def map_stats(m: InstanceMap) -> dict:
    return {
        "instance_count": len(m.instances),
        "voxel_count": int(sum(len(i.voxels) for i in m.instances.values())),
        "memory_bytes": int(sum(i.nbytes() for i in m.instances.values())),
    }
