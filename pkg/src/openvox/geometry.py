"""Sparse voxel sets, depth projection, DBSCAN denoising, normals and the BVH broad phase."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ValidationError

# 21 bits per axis, biased so that packed int64 order equals lexicographic (ix, iy, iz) order.
_BITS = 21
_BIAS = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1
KEY_MIN = -_BIAS
KEY_MAX = _BIAS - 1


def pack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if keys.size and (keys.min() < KEY_MIN or keys.max() > KEY_MAX):
        raise ValidationError("voxel index outside the representable range")
    biased = keys + _BIAS
    return (biased[:, 0] << (2 * _BITS)) | (biased[:, 1] << _BITS) | biased[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    out = np.empty((packed.shape[0], 3), dtype=np.int64)
    out[:, 0] = (packed >> (2 * _BITS)) & _MASK
    out[:, 1] = (packed >> _BITS) & _MASK
    out[:, 2] = packed & _MASK
    return (out - _BIAS).astype(np.int32)


class VoxelSet:
    """Sorted, duplicate-free set of integer voxel keys at a fixed resolution.

    Keys are held packed into int64 so that numeric order is the lexicographic
    (ix, iy, iz) order; all set algebra runs on sorted arrays.
    """

    __slots__ = ("packed", "resolution", "_keys")

    def __init__(self, packed: np.ndarray, resolution: float):
        self.packed = packed
        self.resolution = float(resolution)
        self._keys = None

    @classmethod
    def from_keys(cls, keys: np.ndarray, resolution: float) -> "VoxelSet":
        return cls(np.unique(pack_keys(keys)), resolution)

    @classmethod
    def empty(cls, resolution: float) -> "VoxelSet":
        return cls(np.empty(0, dtype=np.int64), resolution)

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = unpack_keys(self.packed)
        return self._keys

    def __len__(self) -> int:
        return int(self.packed.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VoxelSet):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.packed, other.packed)

    def __repr__(self) -> str:
        return f"VoxelSet(n={len(self)}, r={self.resolution})"

    def centers(self) -> np.ndarray:
        return (self.keys.astype(np.float64) + 0.5) * self.resolution

    def union(self, other: "VoxelSet") -> "VoxelSet":
        _check_resolution(self, other)
        return VoxelSet(np.union1d(self.packed, other.packed), self.resolution)

    def aabb(self) -> "Aabb":
        if len(self) == 0:
            raise ValidationError("empty voxel set has no bounds")
        k = self.keys
        return Aabb(k.min(axis=0) * self.resolution, (k.max(axis=0) + 1) * self.resolution)

    def nbytes(self) -> int:
        return int(self.packed.nbytes)


def _check_resolution(a: VoxelSet, b: VoxelSet) -> None:
    if a.resolution != b.resolution:
        raise ValidationError(f"resolution mismatch: {a.resolution} vs {b.resolution}")


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64))
        if np.any(self.min > self.max):
            raise ValidationError("Aabb min must not exceed max")

    def inflate(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    def contains(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.min) and np.all(other.max <= self.max))


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def check_rigid(pose: np.ndarray, tol: float = 1e-5) -> None:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValidationError(f"pose must be 4x4, got {pose.shape}")
    rot = pose[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=tol):
        raise ValidationError("pose rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > tol:
        raise ValidationError("pose rotation has det != +1")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=tol):
        raise ValidationError("pose bottom row must be [0, 0, 0, 1]")


def project_depth(mask: np.ndarray, depth: np.ndarray, intrinsics: Intrinsics, pose: np.ndarray,
                  d_min: float = 0.1, d_max: float = 10.0) -> PointCloud:
    """Back-project masked pixels with depth in (d_min, d_max) into world coordinates.

    Pixel (u, v) is taken at its integer coordinate; ``pose`` maps camera to world.
    """
    mask = np.asarray(mask)
    depth = np.asarray(depth)
    if mask.shape != depth.shape:
        raise ValidationError(f"mask {mask.shape} and depth {depth.shape} differ")
    check_rigid(pose)
    vs, us = np.nonzero(mask)
    d = depth[vs, us].astype(np.float64)
    ok = np.isfinite(d) & (d > d_min) & (d < d_max)
    us, vs, d = us[ok], vs[ok], d[ok]
    if d.size == 0:
        return PointCloud(np.empty((0, 3), dtype=np.float32))
    x = (us - intrinsics.cx) / intrinsics.fx * d
    y = (vs - intrinsics.cy) / intrinsics.fy * d
    cam = np.stack([x, y, d], axis=1)
    pose = np.asarray(pose, dtype=np.float64)
    world = cam @ pose[:3, :3].T + pose[:3, 3]
    return PointCloud(world.astype(np.float32))


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Labels identical to sequential DBSCAN visiting points in index order.

    Clusters are numbered by discovery order; noise is -1. A border point
    reachable from several clusters belongs to the one discovered first.
    """
    if eps <= 0 or min_pts < 1:
        raise ValidationError("dbscan needs eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    # neighbourhood includes the point itself
    counts = np.ones(n, dtype=np.int64)
    if pairs.size:
        np.add.at(counts, pairs[:, 0], 1)
        np.add.at(counts, pairs[:, 1], 1)
    core = counts >= min_pts
    if not core.any():
        return labels
    core_idx = np.flatnonzero(core)
    if pairs.size:
        both = core[pairs[:, 0]] & core[pairs[:, 1]]
        cp = pairs[both]
    else:
        cp = np.empty((0, 2), dtype=np.int64)
    graph = sparse.coo_matrix((np.ones(len(cp)), (cp[:, 0], cp[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    # order clusters by their lowest-index core point
    comp_core = comp[core_idx]
    first = {}
    for i, c in zip(core_idx, comp_core):
        if c not in first:
            first[c] = i
    order = sorted(first, key=first.get)
    remap = {c: k for k, c in enumerate(order)}
    labels[core_idx] = [remap[c] for c in comp_core]
    if pairs.size:
        # border points: smallest cluster label among core neighbours
        a, b = pairs[:, 0], pairs[:, 1]
        border = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        m = core[a] & ~core[b]
        np.minimum.at(border, b[m], labels[a[m]])
        m = core[b] & ~core[a]
        np.minimum.at(border, a[m], labels[b[m]])
        hit = ~core & (border != np.iinfo(np.int64).max)
        labels[hit] = border[hit]
    return labels


def dbscan_filter(cloud: PointCloud, eps: float, min_pts: int) -> PointCloud:
    """Keep only the largest DBSCAN cluster (ties go to the earlier cluster)."""
    if len(cloud) == 0:
        return PointCloud(cloud.points[:0], None if cloud.normals is None else cloud.normals[:0])
    labels = dbscan_labels(cloud.points, eps, min_pts)
    if labels.max() < 0:
        keep = np.zeros(len(cloud), dtype=bool)
    else:
        sizes = np.bincount(labels[labels >= 0])
        keep = labels == int(np.argmax(sizes))
    normals = None if cloud.normals is None else cloud.normals[keep]
    return PointCloud(cloud.points[keep], normals)


def subvoxel_representatives(cloud: PointCloud, cell: float) -> PointCloud:
    """First point (in input order) of every occupied ``cell``-sized grid cell.

    With ``cell = r / k`` for integer k the cells nest in the r-grid, so the
    voxelization of the representatives equals that of the full cloud.
    """
    if len(cloud) == 0 or cell <= 0:
        return cloud
    keys = pack_keys(np.floor(np.asarray(cloud.points, dtype=np.float64) / cell).astype(np.int64))
    _, first = np.unique(keys, return_index=True)
    first.sort()
    normals = None if cloud.normals is None else cloud.normals[first]
    return PointCloud(cloud.points[first], normals)


def voxelize(cloud: PointCloud | np.ndarray, resolution: float) -> VoxelSet:
    if resolution <= 0:
        raise ValidationError("voxel resolution must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    keys = np.floor(pts / resolution).astype(np.int64)
    return VoxelSet.from_keys(keys, resolution)


def estimate_normals(cloud: PointCloud, k: int, camera: Sequence[float]) -> PointCloud:
    """Per-point PCA normals from the k nearest neighbours, flipped to face ``camera``.

    Neighbourhoods whose covariance has rank < 2 get the unit ray towards the camera.
    """
    pts = np.asarray(cloud.points, dtype=np.float64)
    n = pts.shape[0]
    cam = np.asarray(camera, dtype=np.float64)
    if n == 0:
        return PointCloud(cloud.points, np.empty((0, 3), dtype=np.float32))
    to_cam = cam - pts
    to_cam /= np.maximum(np.linalg.norm(to_cam, axis=1, keepdims=True), 1e-12)
    if n < 3 or k < 3:
        return PointCloud(cloud.points, to_cam.astype(np.float32))
    k = min(k, n)
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    flip = np.einsum("ij,ij->i", normals, to_cam) < 0
    normals[flip] *= -1.0
    scale = max(float(evals[:, 2].max()), 1e-30)
    degenerate = evals[:, 1] <= 1e-9 * scale
    normals[degenerate] = to_cam[degenerate]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points, normals.astype(np.float32))


@dataclass(frozen=True)
class Overlap:
    intersection: int
    iou: float
    overlap_min: float


def intersection_count(a: VoxelSet, b: VoxelSet) -> int:
    _check_resolution(a, b)
    small, large = (a.packed, b.packed) if len(a) <= len(b) else (b.packed, a.packed)
    if small.size == 0:
        return 0
    pos = np.searchsorted(large, small)
    pos[pos == large.size] = 0
    return int(np.count_nonzero(large[pos] == small))


def voxel_overlap(a: VoxelSet, b: VoxelSet) -> Overlap:
    inter = intersection_count(a, b)
    na, nb = len(a), len(b)
    union = na + nb - inter
    iou = inter / union if union else 0.0
    small = min(na, nb)
    omin = inter / small if small else 0.0
    return Overlap(inter, iou, omin)


class Bvh:
    """Binary AABB tree over (id, box) leaves, median split on the longest centroid axis."""

    def __init__(self, ids: Iterable[int], mins: np.ndarray, maxs: np.ndarray, leaf_size: int = 4):
        self.ids = np.asarray(list(ids), dtype=np.int64)
        mins = np.asarray(mins, dtype=np.float64).reshape(-1, 3)
        maxs = np.asarray(maxs, dtype=np.float64).reshape(-1, 3)
        self.leaf_size = max(1, int(leaf_size))
        self.node_min: list[np.ndarray] = []
        self.node_max: list[np.ndarray] = []
        self.children: list[tuple[int, int]] = []
        self.leaf_range: list[tuple[int, int]] = []
        self.order = np.arange(len(self.ids))
        self._mins, self._maxs = mins, maxs
        if len(self.ids):
            self._build(0, len(self.ids))
        self.node_min_arr = np.array(self.node_min).reshape(-1, 3)
        self.node_max_arr = np.array(self.node_max).reshape(-1, 3)
        self.leaf_ids = self.ids[self.order]
        self.leaf_mins = mins[self.order]
        self.leaf_maxs = maxs[self.order]

    @classmethod
    def from_boxes(cls, boxes: dict[int, Aabb], leaf_size: int = 4) -> "Bvh":
        ids = sorted(boxes)
        mins = np.array([boxes[i].min for i in ids]).reshape(-1, 3)
        maxs = np.array([boxes[i].max for i in ids]).reshape(-1, 3)
        return cls(ids, mins, maxs, leaf_size)

    def __len__(self) -> int:
        return len(self.ids)

    def _build(self, lo: int, hi: int) -> int:
        sel = self.order[lo:hi]
        node = len(self.node_min)
        self.node_min.append(self._mins[sel].min(axis=0))
        self.node_max.append(self._maxs[sel].max(axis=0))
        self.children.append((-1, -1))
        self.leaf_range.append((lo, hi))
        if hi - lo <= self.leaf_size:
            return node
        cent = 0.5 * (self._mins[sel] + self._maxs[sel])
        axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
        # stable order keeps the build deterministic for equal centroids
        part = np.argsort(cent[:, axis], kind="stable")
        self.order[lo:hi] = sel[part]
        mid = (lo + hi) // 2
        left = self._build(lo, mid)
        right = self._build(mid, hi)
        self.children[node] = (left, right)
        self.leaf_range[node] = (-1, -1)
        return node

    def query(self, box: Aabb, margin: float = 0.0) -> list[int]:
        if margin < 0:
            raise ValidationError("margin must be non-negative")
        if not len(self.ids):
            return []
        qmin = box.min - margin
        qmax = box.max + margin
        out: list[int] = []
        stack = [0]
        nmin, nmax = self.node_min_arr, self.node_max_arr
        while stack:
            node = stack.pop()
            if np.any(nmin[node] > qmax) or np.any(qmin > nmax[node]):
                continue
            left, right = self.children[node]
            if left < 0:
                lo, hi = self.leaf_range[node]
                hit = np.all(self.leaf_mins[lo:hi] <= qmax, axis=1) & np.all(qmin <= self.leaf_maxs[lo:hi], axis=1)
                out.extend(int(i) for i in self.leaf_ids[lo:hi][hit])
            else:
                stack.append(right)
                stack.append(left)
        return sorted(out)

    def check(self) -> None:
        """Raise if a child box escapes its parent or an id is missing/duplicated."""
        seen: list[int] = []
        for node, (left, right) in enumerate(self.children):
            if left < 0:
                lo, hi = self.leaf_range[node]
                seen.extend(int(i) for i in self.leaf_ids[lo:hi])
                if np.any(self.leaf_mins[lo:hi] < self.node_min_arr[node]) or np.any(self.leaf_maxs[lo:hi] > self.node_max_arr[node]):
                    raise AssertionError("leaf box escapes its node")
                continue
            for child in (left, right):
                if np.any(self.node_min_arr[child] < self.node_min_arr[node]) or np.any(self.node_max_arr[child] > self.node_max_arr[node]):
                    raise AssertionError("child box escapes its parent")
        if sorted(seen) != sorted(int(i) for i in self.ids):
            raise AssertionError("bvh leaves do not cover the id set exactly once")


def bvh_build(boxes: dict[int, Aabb], leaf_size: int = 4) -> Bvh:
    return Bvh.from_boxes(boxes, leaf_size)


def bvh_query(bvh: Bvh, box: Aabb, margin: float = 0.0) -> list[int]:
    return bvh.query(box, margin)
