"""Ray-traced visibility of labelled scene voxels along a trajectory."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from ..geometry import VoxelSet

CSV_HEADER = ["ID", "Category", "Region", "Model Voxels", "Covered Voxels", "Coverage (%)"]
COVERED_THRESHOLD = 50.0


@dataclass(frozen=True)
class CoverageCamera:
    width: int = 64
    height: int = 64
    hfov_deg: float = 90.0
    max_range: float = 10.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or not 0 < self.hfov_deg < 180 or self.max_range <= 0:
            raise ValidationError("invalid coverage camera")

    def directions(self, pose: np.ndarray) -> np.ndarray:
        """Unit world-frame ray directions, one per pixel, for a camera-to-world pose."""
        f = (self.width / 2) / math.tan(math.radians(self.hfov_deg) / 2)
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d = np.stack([(u - (self.width - 1) / 2) / f, (v - (self.height - 1) / 2) / f,
                      np.ones(u.shape)], -1).reshape(-1, 3)
        d = d @ np.asarray(pose, dtype=np.float64)[:3, :3].T
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class LabelledVoxels:
    """Instance voxels packed into a dense label volume for ray traversal."""

    resolution: float
    offset: np.ndarray  # integer key of volume index (0, 0, 0)
    labels: np.ndarray  # int32 volume, -1 empty

    @classmethod
    def build(cls, instances: dict[int, VoxelSet]) -> "LabelledVoxels":
        if not instances:
            raise ValidationError("no labelled voxels")
        res = {v.resolution for v in instances.values()}
        if len(res) != 1:
            raise ValidationError("instances use different resolutions")
        keys = np.concatenate([v.keys for v in instances.values()]).astype(np.int64)
        lo, hi = keys.min(axis=0), keys.max(axis=0)
        vol = np.full(tuple(hi - lo + 1), -1, dtype=np.int32)
        # lower id wins a voxel claimed twice
        for iid in sorted(instances, reverse=True):
            k = instances[iid].keys.astype(np.int64) - lo
            vol[k[:, 0], k[:, 1], k[:, 2]] = iid
        return cls(res.pop(), lo, vol)

    def cast(self, origin: np.ndarray, dirs: np.ndarray, max_range: float) -> tuple[np.ndarray, np.ndarray]:
        """First labelled voxel hit by each ray within ``max_range``: (volume index or -1 rows, hit mask)."""
        r = self.resolution
        o = np.asarray(origin, dtype=np.float64) / r - self.offset  # volume units
        d = np.asarray(dirs, dtype=np.float64)
        n = d.shape[0]
        shape = np.array(self.labels.shape)
        tmax_range = max_range / r
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (0.0 - o) * inv
            t1 = (shape - o) * inv
        tnear = np.nanmax(np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)), axis=1)
        tfar = np.nanmin(np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)), axis=1)
        tnear = np.maximum(tnear, 0.0)
        alive = (tnear <= tfar) & (tnear <= tmax_range)
        p = o + tnear[:, None] * d
        cell = np.clip(np.floor(p).astype(np.int64), 0, shape - 1)
        step = np.where(d > 0, 1, -1)
        with np.errstate(divide="ignore", invalid="ignore"):
            nxt = np.where(d > 0, cell + 1, cell) - o
            tnext = np.where(d != 0, nxt * inv, np.inf)
            tdelta = np.where(d != 0, np.abs(inv), np.inf)
        # the entry cell is entered at tnear
        tcur = tnear.copy()
        hit = np.zeros(n, dtype=bool)
        out = np.full((n, 3), -1, dtype=np.int64)
        idx = np.flatnonzero(alive)
        while idx.size:
            c = cell[idx]
            lab = self.labels[c[:, 0], c[:, 1], c[:, 2]]
            got = (lab >= 0) & (tcur[idx] <= tmax_range)
            hit[idx[got]] = True
            out[idx[got]] = c[got]
            idx = idx[~got]
            if not idx.size:
                break
            tn = tnext[idx]
            axis = np.argmin(tn, axis=1)
            rows = np.arange(idx.size)
            tcur[idx] = tn[rows, axis]
            cell[idx, axis] += step[idx, axis]
            tnext[idx, axis] += tdelta[idx, axis]
            c = cell[idx]
            inside = np.all((c >= 0) & (c < shape), axis=1) & (tcur[idx] <= tmax_range)
            idx = idx[inside]
        return out, hit


@dataclass
class CoverageRow:
    id: int
    category: str
    region: int
    model_voxels: int
    covered_voxels: int

    @property
    def coverage(self) -> float:
        return 100.0 * self.covered_voxels / self.model_voxels if self.model_voxels else 0.0


@dataclass
class CoverageReport:
    rows: list[CoverageRow]
    surface_coverage: float
    covered_object_ratio: float
    poses: int
    camera: CoverageCamera = field(default_factory=CoverageCamera)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.id, r.category, r.region, r.model_voxels, r.covered_voxels, f"{r.coverage:.2f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"poses": self.poses, "surface_coverage": self.surface_coverage,
                "covered_object_ratio": self.covered_object_ratio, "threshold_percent": COVERED_THRESHOLD,
                "camera": {"width": self.camera.width, "height": self.camera.height,
                           "hfov_deg": self.camera.hfov_deg, "max_range": self.camera.max_range}}


def visible_voxels(volume: LabelledVoxels, poses: list[np.ndarray], camera: CoverageCamera) -> dict[int, set]:
    """Per instance id, the packed set of volume indices seen from any pose."""
    seen: dict[int, set] = {}
    dims = np.array(volume.labels.shape, dtype=np.int64)
    for pose in poses:
        pose = np.asarray(pose, dtype=np.float64)
        cells, hit = volume.cast(pose[:3, 3], camera.directions(pose), camera.max_range)
        c = cells[hit]
        if not c.size:
            continue
        flat = np.unique((c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2])
        labs = volume.labels.ravel()[flat]
        for iid in np.unique(labs):
            seen.setdefault(int(iid), set()).update(flat[labs == iid].tolist())
    return seen


def coverage_analysis(instances: dict[int, VoxelSet], poses: list[np.ndarray],
                      categories: dict[int, str] | None = None, regions: dict[int, int] | None = None,
                      camera: CoverageCamera | None = None) -> CoverageReport:
    camera = camera or CoverageCamera()
    volume = LabelledVoxels.build(instances)
    model = {iid: int(np.count_nonzero(volume.labels == iid)) for iid in instances}
    seen = visible_voxels(volume, poses, camera)
    rows = [CoverageRow(iid, (categories or {}).get(iid, str(iid)), (regions or {}).get(iid, 0),
                        model[iid], len(seen.get(iid, ()))) for iid in sorted(instances)]
    total = sum(r.model_voxels for r in rows)
    covered = sum(r.covered_voxels for r in rows)
    objects = sum(1 for r in rows if r.coverage > COVERED_THRESHOLD)
    return CoverageReport(rows, covered / total if total else 0.0, objects / len(rows) if rows else 0.0,
                          len(poses), camera)
