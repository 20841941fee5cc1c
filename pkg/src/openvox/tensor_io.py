"""DTEN tensor files, frame manifests, trajectory directories and map snapshots.

A DTEN file is ``b"DTEN"``, a version byte (1), a dtype code byte, an ndim
byte, ``ndim`` little-endian u32 dims and then the raw little-endian
row-major payload. Metadata lives in UTF-8 JSON next to the tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DimensionError, FormatError, ValidationError
from .geometry import Intrinsics, VoxelSet, check_rigid, pack_keys
from .instance_map import AssociationConfig, Instance, InstanceMap
from .semantics import QualityBreakdown, SemanticFeature

MAGIC = b"DTEN"
VERSION = 1
FORMAT_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i4")}
CODES = {"float32": 0, "uint8": 1, "int32": 2}

FRAME_FILES = ("pose_file", "depth_file", "masks_file", "patch_grid_file", "tracking_grid_file",
               "global_embedding_file")


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = CODES.get(arr.dtype.name)
    if code is None:
        raise ValidationError(f"unsupported tensor dtype {arr.dtype}")
    if arr.ndim > 4:
        raise ValidationError("tensors have at most 4 dims")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("bad magic, not a DTEN file")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported DTEN version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if ndim > 4:
        raise FormatError("ndim > 4")
    off = 7 + 4 * ndim
    if len(buf) < off:
        raise CorruptionError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise CorruptionError(f"payload is {len(buf) - off} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims).copy()


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- frames ------------------------------------------------------------------------


@dataclass
class FrameRecord:
    frame_id: int
    pose: np.ndarray
    intrinsics: Intrinsics
    depth: np.ndarray
    masks: np.ndarray
    confidences: np.ndarray
    patch_grid: np.ndarray
    tracking_grid: np.ndarray
    global_embedding: np.ndarray
    patch_size: int = 14

    def validate(self) -> None:
        h, w = self.intrinsics.height, self.intrinsics.width
        if h <= 0 or w <= 0:
            raise DimensionError("image dims must be positive")
        if self.depth.shape != (h, w):
            raise DimensionError(f"depth {self.depth.shape} != image {(h, w)}")
        if self.masks.ndim != 3 or self.masks.shape[1:] != (h, w):
            raise DimensionError(f"masks {self.masks.shape} do not match image {(h, w)}")
        if self.confidences.shape != (self.masks.shape[0],):
            raise DimensionError("one confidence per mask required")
        p = self.patch_size
        if h % p or w % p:
            raise DimensionError(f"image {(h, w)} not divisible by patch size {p}")
        for name, grid in (("patch grid", self.patch_grid), ("tracking grid", self.tracking_grid)):
            if grid.ndim != 3 or grid.shape[:2] != (h // p, w // p):
                raise DimensionError(f"{name} {grid.shape[:2]} != {(h // p, w // p)} for patch size {p}")
        if self.global_embedding.shape != (self.patch_grid.shape[2],):
            raise DimensionError("global embedding width differs from patch feature width")
        check_rigid(self.pose)


def save_frame(frame: FrameRecord, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(np.asarray(frame.pose, dtype=np.float32), d / "pose.dten")
    write_tensor(np.asarray(frame.depth, dtype=np.float32), d / "depth.dten")
    write_tensor(np.asarray(frame.masks, dtype=np.uint8), d / "masks.dten")
    write_tensor(np.asarray(frame.patch_grid, dtype=np.float32), d / "patch_grid.dten")
    write_tensor(np.asarray(frame.tracking_grid, dtype=np.float32), d / "tracking_grid.dten")
    write_tensor(np.asarray(frame.global_embedding, dtype=np.float32), d / "global_embedding.dten")
    manifest = {
        "format_version": FORMAT_VERSION,
        "frame_id": int(frame.frame_id),
        "pose_file": "pose.dten",
        "depth_file": "depth.dten",
        "masks_file": "masks.dten",
        "patch_grid_file": "patch_grid.dten",
        "tracking_grid_file": "tracking_grid.dten",
        "global_embedding_file": "global_embedding.dten",
        "intrinsics": frame.intrinsics.to_dict(),
        "patch_size": int(frame.patch_size),
        "mask_confidences": [float(c) for c in np.asarray(frame.confidences, dtype=np.float32)],
    }
    write_json(manifest, d / "manifest.json")
    return d / "manifest.json"


def load_frame(manifest_path: str | Path) -> FrameRecord:
    mpath = Path(manifest_path)
    if not mpath.exists():
        raise FileNotFoundError(mpath)
    m = read_json(mpath)
    base = mpath.parent
    missing = [k for k in FRAME_FILES if k not in m]
    if missing:
        raise FormatError(f"manifest lacks {missing}")
    t = {k: read_tensor(base / m[k]) for k in FRAME_FILES}
    intr = m["intrinsics"]
    frame = FrameRecord(
        frame_id=int(m["frame_id"]),
        pose=t["pose_file"].astype(np.float64),
        intrinsics=Intrinsics(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                              int(intr["width"]), int(intr["height"])),
        depth=t["depth_file"],
        masks=t["masks_file"],
        confidences=np.asarray(m.get("mask_confidences", []), dtype=np.float32),
        patch_grid=t["patch_grid_file"],
        tracking_grid=t["tracking_grid_file"],
        global_embedding=t["global_embedding_file"],
        patch_size=int(m.get("patch_size", 14)),
    )
    frame.validate()
    return frame


def write_trajectory_index(directory: str | Path, frame_ids: list[int], extra: dict | None = None) -> Path:
    d = Path(directory)
    index = {
        "format_version": FORMAT_VERSION,
        "frames": [{"frame_id": int(i), "manifest": f"frames/{int(i):06d}/manifest.json"} for i in frame_ids],
    }
    if extra:
        index.update(extra)
    write_json(index, d / "trajectory.json")
    return d / "trajectory.json"


def frame_dir(directory: str | Path, frame_id: int) -> Path:
    return Path(directory) / "frames" / f"{int(frame_id):06d}"


def read_trajectory_index(directory: str | Path) -> list[Path]:
    d = Path(directory)
    index = read_json(d / "trajectory.json")
    return [d / e["manifest"] for e in index["frames"]]


# -- map snapshots ------------------------------------------------------------------


def _offsets(lengths: list[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(lengths, dtype=np.int64)]).astype(np.int32)


def save_map(m: InstanceMap, path: str | Path) -> Path:
    """Write ``snapshot.json`` plus tensors into directory ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    ids = sorted(m.instances)
    insts = [m.instances[i] for i in ids]
    df = insts[0].semantic.vector.shape[0] if insts else 0
    dt = insts[0].tracking.shape[0] if insts else 0
    ints = np.array([[i.id, i.obs_count, i.last_seen, i.semantic.quality.mask_area] for i in insts],
                    dtype=np.int32).reshape(-1, 4)
    quality = np.array([i.semantic.quality.as_row() for i in insts], dtype=np.float32).reshape(-1, 8)
    sem = np.array([i.semantic.vector for i in insts], dtype=np.float32).reshape(len(insts), df)
    trk = np.array([i.tracking for i in insts], dtype=np.float32).reshape(len(insts), dt)
    keys = (np.concatenate([i.voxels.keys for i in insts]) if insts else np.empty((0, 3))).astype(np.int32)
    write_tensor(ints, d / "instances.dten")
    write_tensor(quality, d / "quality.dten")
    write_tensor(sem, d / "semantic.dten")
    write_tensor(trk, d / "tracking.dten")
    write_tensor(keys.reshape(-1, 3), d / "voxels.dten")
    write_tensor(_offsets([len(i.voxels) for i in insts]), d / "voxel_offsets.dten")
    meta = {
        "format_version": FORMAT_VERSION,
        "resolution": m.resolution,
        "config": {k: getattr(m.config, k) for k in ("tau_geo", "tau_vis", "margin", "min_voxels")},
        "config_hash": m.config_hash(),
        "instance_count": len(insts),
        "next_id": m.next_id,
    }
    write_json(meta, d / "snapshot.json")
    return d


def load_map(path: str | Path) -> InstanceMap:
    d = Path(path)
    meta = read_json(d / "snapshot.json")
    m = InstanceMap(float(meta["resolution"]), AssociationConfig(**meta["config"]))
    ints = read_tensor(d / "instances.dten")
    quality = read_tensor(d / "quality.dten")
    sem = read_tensor(d / "semantic.dten")
    trk = read_tensor(d / "tracking.dten")
    keys = read_tensor(d / "voxels.dten")
    offs = read_tensor(d / "voxel_offsets.dten")
    n = int(meta["instance_count"])
    if not (ints.shape[0] == quality.shape[0] == sem.shape[0] == trk.shape[0] == n == offs.shape[0] - 1):
        raise CorruptionError("snapshot tensors disagree on instance count")
    for row in range(n):
        iid, obs, last, area = (int(v) for v in ints[row])
        qs = quality[row]
        qb = QualityBreakdown(qs[0], qs[1], qs[2], qs[3], qs[4], qs[5], qs[6], area, qs[7])
        vox = VoxelSet(pack_keys(keys[offs[row]:offs[row + 1]]), m.resolution)
        m.add(Instance(iid, vox, SemanticFeature(sem[row].copy(), qb), trk[row].copy(), obs, last))
    m.next_id = int(meta.get("next_id", m.next_id))
    if meta.get("config_hash") not in (None, m.config_hash()):
        raise CorruptionError("snapshot config hash mismatch")
    m.rebuild_bvh()
    return m


# -- ground truth and embedding tables -----------------------------------------------


@dataclass
class GtInstance:
    id: int
    cls: int
    voxels: VoxelSet
    region: int = 0


@dataclass
class GroundTruth:
    points: np.ndarray
    labels: np.ndarray
    instances: list[GtInstance]
    resolution: float


@dataclass
class TextEmbeddingTable:
    names: list[str]
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] != len(self.names):
            raise DimensionError("one embedding row per class name")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("class names must be unique")
        if emb.size and not np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-4):
            raise ValidationError("embedding rows must be unit length")
        self.embeddings = emb


def save_ground_truth(gt: GroundTruth, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(np.asarray(gt.points, dtype=np.float32).reshape(-1, 3), d / "points.dten")
    write_tensor(np.asarray(gt.labels, dtype=np.int32), d / "labels.dten")
    keys = [g.voxels.keys for g in gt.instances]
    write_tensor((np.concatenate(keys) if keys else np.empty((0, 3))).astype(np.int32).reshape(-1, 3),
                 d / "voxels.dten")
    write_tensor(_offsets([len(g.voxels) for g in gt.instances]), d / "voxel_offsets.dten")
    write_json({"format_version": FORMAT_VERSION, "resolution": gt.resolution,
                "instances": [{"id": g.id, "class": g.cls, "region": g.region} for g in gt.instances]},
               d / "gt.json")


def load_ground_truth(directory: str | Path) -> GroundTruth:
    d = Path(directory)
    meta = read_json(d / "gt.json")
    res = float(meta["resolution"])
    keys = read_tensor(d / "voxels.dten")
    offs = read_tensor(d / "voxel_offsets.dten")
    insts = [GtInstance(int(e["id"]), int(e["class"]),
                        VoxelSet(pack_keys(keys[offs[k]:offs[k + 1]]), res), int(e.get("region", 0)))
             for k, e in enumerate(meta["instances"])]
    return GroundTruth(read_tensor(d / "points.dten"), read_tensor(d / "labels.dten").astype(np.int64),
                       insts, res)


def save_table(table: TextEmbeddingTable, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(table.embeddings, d / "table.dten")
    write_json({"format_version": FORMAT_VERSION, "names": list(table.names)}, d / "table.json")


def load_table(directory: str | Path) -> TextEmbeddingTable:
    d = Path(directory)
    return TextEmbeddingTable(read_json(d / "table.json")["names"], read_tensor(d / "table.dten"))
