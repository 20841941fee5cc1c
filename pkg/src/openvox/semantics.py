"""Distinctiveness-weighted mask pooling and the observation quality score.

Quality values are held as float32 so that a stored map reloads bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

EPSILON = 1e-6
LAMBDA_SIZE = 3.3
COVER_MIN = 0.25

f32 = np.float32


def compute_distinctiveness(grid: np.ndarray, eps: float = EPSILON) -> np.ndarray:
    """Residual norm of each patch against the grid mean, normalised by the mean residual norm."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[0] * grid.shape[1] < 1:
        raise ValidationError(f"patch grid must be Hp x Wp x Df, got {grid.shape}")
    # shifting by one patch first leaves D unchanged and makes a uniform grid exactly zero
    grid = grid - grid[0, 0]
    mean = grid.reshape(-1, grid.shape[2]).mean(axis=0)
    resid = np.linalg.norm(grid - mean, axis=2)
    return (resid / (resid.mean() + eps)).astype(np.float32)


def patch_coverage(mask: np.ndarray, patch: int) -> np.ndarray:
    """Fraction of each patch's pixels inside ``mask``."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValidationError(f"mask {mask.shape} is not divisible by patch size {patch}")
    blocks = mask.reshape(h // patch, patch, w // patch, patch).astype(np.float64)
    return blocks.mean(axis=(1, 3))


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise ValidationError("empty mask")
    return v / n


def aggregate_by_coverage(grid: np.ndarray, cover: np.ndarray, distinct: np.ndarray | None = None,
                          cover_min: float = COVER_MIN) -> np.ndarray:
    """Unit-norm weighted mean of patch features.

    Weights are ``distinct * cover`` on patches with cover >= cover_min (or just
    ``cover`` when ``distinct`` is None). If every weight vanishes, falls back to
    the plain mean of patches with any coverage.
    """
    grid = np.asarray(grid, dtype=np.float64)
    cover = np.asarray(cover, dtype=np.float64)
    w = np.where(cover >= cover_min, cover, 0.0)
    if distinct is not None:
        w = w * np.asarray(distinct, dtype=np.float64)
    total = w.sum()
    if total > 0:
        v = np.tensordot(w, grid, axes=([0, 1], [0, 1])) / total
    else:
        any_cov = cover > 0
        if not any_cov.any():
            raise ValidationError("empty mask")
        v = grid[any_cov].mean(axis=0)
    return _normalize(v).astype(np.float32)


def aggregate_masked_feature(grid: np.ndarray, distinct: np.ndarray, mask: np.ndarray, patch: int,
                             cover_min: float = COVER_MIN) -> np.ndarray:
    return aggregate_by_coverage(grid, patch_coverage(mask, patch), distinct, cover_min)


def s_size(mask_area: float, height: int, width: int, lam: float = LAMBDA_SIZE) -> np.float32:
    if not 0 <= mask_area <= height * width:
        raise ValidationError("mask area outside [0, H*W]")
    return f32(min(lam * mask_area / (height * width), 1.0))


def s_angle(normals: np.ndarray, view_rays: np.ndarray) -> np.float32:
    """Mean over voxels of max(0, -ray . normal); rays point from the camera to the voxel."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    rays = np.asarray(view_rays, dtype=np.float64).reshape(-1, 3)
    if normals.shape != rays.shape or normals.shape[0] == 0:
        raise ValidationError("s_angle needs one ray per normal and at least one voxel")
    dots = -np.einsum("ij,ij->i", rays, normals)
    return f32(min(max(np.maximum(dots, 0.0).mean(), 0.0), 1.0))


def s_sem(local: np.ndarray, global_embedding: np.ndarray) -> np.float32:
    a = np.asarray(local, dtype=np.float64)
    b = np.asarray(global_embedding, dtype=np.float64)
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return f32(min(max(cos, 0.0), 1.0))


def mean_distinctiveness(distinct: np.ndarray, cover: np.ndarray) -> float:
    cover = np.asarray(cover, dtype=np.float64)
    total = cover.sum()
    if total <= 0:
        raise ValidationError("mask covers no patch")
    return float((np.asarray(distinct, dtype=np.float64) * cover).sum() / total)


def s_dist(mean_d: float) -> np.float32:
    return f32(0.5 + 0.5 * mean_d)


@dataclass(frozen=True)
class QualityBreakdown:
    s_size: np.float32
    s_angle: np.float32
    s_geo: np.float32
    s_sem: np.float32
    s_dist: np.float32
    q: np.float32
    lam: np.float32 = f32(LAMBDA_SIZE)
    mask_area: int = 0
    mean_distinctiveness: np.float32 = f32(0.0)

    def as_row(self) -> list[float]:
        return [self.s_size, self.s_angle, self.s_geo, self.s_sem, self.s_dist, self.q,
                self.lam, self.mean_distinctiveness]

    def to_dict(self) -> dict:
        return {"s_size": float(self.s_size), "s_angle": float(self.s_angle), "s_geo": float(self.s_geo),
                "s_sem": float(self.s_sem), "s_dist": float(self.s_dist), "q": float(self.q),
                "lambda": float(self.lam), "mask_area": self.mask_area,
                "mean_distinctiveness": float(self.mean_distinctiveness)}


def quality(size: float, angle: float, sem: float, dist: float, mask_area: int = 0,
            mean_d: float = 0.0) -> QualityBreakdown:
    """Combine the four factors; all arithmetic is float32 so q is reproducible bit for bit."""
    size, angle, sem, dist = f32(size), f32(angle), f32(sem), f32(dist)
    geo = size * angle
    q = geo * sem * dist
    return QualityBreakdown(size, angle, geo, sem, dist, q, f32(LAMBDA_SIZE), int(mask_area), f32(mean_d))


@dataclass(frozen=True)
class SemanticFeature:
    vector: np.ndarray
    quality: QualityBreakdown = field(default_factory=lambda: quality(0, 0, 0, 0))

    @property
    def q(self) -> np.float32:
        return self.quality.q


def fuse_semantic(current: SemanticFeature | None, observed: SemanticFeature) -> SemanticFeature:
    """Replace only on strictly higher quality; ties keep the incumbent."""
    if current is None or observed.q > current.q:
        return observed
    return current
