"""Open-vocabulary queries over a finished map and the evaluation protocol around them."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geometry import VoxelSet, intersection_count
from .instance_map import InstanceMap
from .tensor_io import GroundTruth, TextEmbeddingTable

log = logging.getLogger(__name__)

UNASSIGNED = -1
D_ASSIGN_FACTOR = 5.0


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def rank_instances(m: InstanceMap, query: np.ndarray, k: int | None = None) -> list[tuple[int, float]]:
    """Instances by descending cosine to ``query``; equal cosines keep ascending id order."""
    if not m.instances:
        return []
    ids = np.array(sorted(m.instances), dtype=np.int64)
    feats = _unit(np.stack([m.instances[i].semantic.vector for i in ids]))
    q = _unit(np.asarray(query, dtype=np.float64).ravel())
    if q.shape[0] != feats.shape[1]:
        raise ValidationError(f"query dim {q.shape[0]} differs from feature dim {feats.shape[1]}")
    cos = feats @ q
    order = np.lexsort((ids, -cos))
    if k is not None:
        order = order[:max(k, 0)]
    return [(int(ids[j]), float(cos[j])) for j in order]


def class_scores(feature: np.ndarray, table: TextEmbeddingTable) -> np.ndarray:
    return table.embeddings.astype(np.float64) @ _unit(np.asarray(feature).ravel())


def class_ranking(feature: np.ndarray, table: TextEmbeddingTable) -> np.ndarray:
    """All class indices by descending cosine, ties by ascending index."""
    s = class_scores(feature, table)
    return np.lexsort((np.arange(s.size), -s))


def classify_topk(feature: np.ndarray, table: TextEmbeddingTable, k: int) -> np.ndarray:
    if k < 1:
        raise ValidationError("k must be at least 1")
    return class_ranking(feature, table)[:k]


@dataclass
class DenseTransfer:
    labels: np.ndarray  # predicted class per GT point, UNASSIGNED beyond d_assign
    instance: np.ndarray  # nearest instance id per point, -1 when unassigned
    d_assign: float

    @property
    def unassigned_fraction(self) -> float:
        return float(np.mean(self.labels == UNASSIGNED)) if self.labels.size else 0.0


def dense_transfer(m: InstanceMap, points: np.ndarray, table: TextEmbeddingTable,
                   d_assign: float | None = None) -> DenseTransfer:
    """Label each point with the top-1 class of the instance owning its nearest voxel centre.

    Voxel centres at equal distance resolve to the lowest instance id.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d_assign = D_ASSIGN_FACTOR * m.resolution if d_assign is None else float(d_assign)
    labels = np.full(pts.shape[0], UNASSIGNED, dtype=np.int64)
    owner = np.full(pts.shape[0], -1, dtype=np.int64)
    if not m.instances or pts.shape[0] == 0:
        return DenseTransfer(labels, owner, d_assign)
    ids = sorted(m.instances)
    centers = np.concatenate([m.instances[i].voxels.centers() for i in ids])
    vid = np.concatenate([np.full(len(m.instances[i].voxels), i, dtype=np.int64) for i in ids])
    top1 = {i: int(classify_topk(m.instances[i].semantic.vector, table, 1)[0]) for i in ids}
    tree = cKDTree(centers)
    dist, _ = tree.query(pts, k=1)
    for p in np.flatnonzero(dist <= d_assign):
        # every centre at the minimum distance, so the id tie rule is exact
        near = tree.query_ball_point(pts[p], dist[p] * (1 + 1e-12) + 1e-12)
        iid = int(vid[near].min())
        owner[p] = iid
        labels[p] = top1[iid]
    return DenseTransfer(labels, owner, d_assign)


def confusion_matrix(gt_labels: np.ndarray, pred_labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are GT classes, columns predictions; unassigned points are left out."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    if gt_labels.shape != pred_labels.shape:
        raise ValidationError("label arrays differ in length")
    keep = pred_labels != UNASSIGNED
    g, p = gt_labels[keep], pred_labels[keep]
    if g.size and (g.min() < 0 or g.max() >= n_classes or p.min() < 0 or p.max() >= n_classes):
        raise ValidationError("label outside the class range")
    return np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def segmentation_metrics(conf: np.ndarray) -> dict:
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1] or np.any(conf < 0):
        raise ValidationError("confusion matrix must be square and nonnegative")
    rows = conf.sum(axis=1)
    cols = conf.sum(axis=0)
    diag = np.diag(conf)
    present = rows > 0
    if not present.any():
        return {"mAcc": 0.0, "mIoU": 0.0, "fmIoU": 0.0, "per_class": []}
    acc = np.divide(diag, rows, out=np.zeros_like(diag), where=present)
    union = rows + cols - diag
    iou = np.divide(diag, union, out=np.zeros_like(diag), where=union > 0)
    per_class = [{"class": int(c), "support": int(rows[c]), "acc": float(acc[c]), "iou": float(iou[c])}
                 for c in np.flatnonzero(present)]
    return {
        "mAcc": float(acc[present].mean()),
        "mIoU": float(iou[present].mean()),
        "fmIoU": float((rows[present] * iou[present]).sum() / rows[present].sum()),
        "per_class": per_class,
    }


def iou_matrix(pred: list[VoxelSet], gt: list[VoxelSet]) -> np.ndarray:
    out = np.zeros((len(pred), len(gt)))
    for i, a in enumerate(pred):
        for j, b in enumerate(gt):
            inter = intersection_count(a, b)
            if inter:
                out[i, j] = inter / (len(a) + len(b) - inter)
    return out


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (row, col) indices into the IoU matrix
    ious: list[float]
    total: float
    strict: bool = False


def hungarian_match(iou: np.ndarray, strict: bool = False) -> Assignment:
    """One-to-one assignment maximising total IoU.

    All assigned pairs are kept unless ``strict``, which drops pairs with IoU <= 0.5
    after the optimum has been found.
    """
    iou = np.asarray(iou, dtype=np.float64)
    if iou.ndim != 2:
        raise ValidationError("IoU matrix must be 2-D")
    if iou.size == 0:
        return Assignment([], [], 0.0, strict)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    pairs, vals = [], []
    for r, c in zip(rows, cols):
        if strict and iou[r, c] <= 0.5:
            continue
        pairs.append((int(r), int(c)))
        vals.append(float(iou[r, c]))
    return Assignment(pairs, vals, float(sum(vals)), strict)


def gt_rank(feature: np.ndarray, table: TextEmbeddingTable, gt_class: int) -> int:
    """1-based position of ``gt_class`` in the cosine ranking of ``feature``."""
    return int(np.flatnonzero(class_ranking(feature, table) == gt_class)[0]) + 1


def topk_from_ranks(ranks: np.ndarray, n_classes: int, ks: list[int] | None = None) -> dict:
    ranks = np.asarray(ranks, dtype=np.int64)
    curve = np.array([np.mean(ranks <= k) if ranks.size else 0.0 for k in range(1, n_classes + 1)])
    out = {f"Acc@{k}": float(curve[min(k, n_classes) - 1]) if ranks.size else 0.0 for k in (ks or [1, 5])}
    out["AUC_topk"] = float(curve.mean()) if ranks.size else 0.0
    out["curve"] = [float(v) for v in curve]
    out["matched"] = int(ranks.size)
    return out


def retrieval_metrics(features: list[np.ndarray], gt_classes: list[int], table: TextEmbeddingTable,
                      ks: list[int] | None = None) -> dict:
    """Acc@k for each k and AUC_topk = mean of Acc@k over k = 1..C, over matched pairs."""
    ranks = np.array([gt_rank(f, table, c) for f, c in zip(features, gt_classes)], dtype=np.int64)
    return topk_from_ranks(ranks, len(table.names), ks)


@dataclass
class EvalReport:
    dense: dict
    unassigned_fraction: float
    retrieval: dict
    strict_retrieval: dict
    matches: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"dense": self.dense, "unassigned_fraction": self.unassigned_fraction,
                "retrieval": {"all_pairs": self.retrieval, "iou_gt_0.5": self.strict_retrieval},
                "matches": self.matches, "warnings": self.warnings}


def evaluate(m: InstanceMap, gt: GroundTruth, table: TextEmbeddingTable, ks: list[int] | None = None,
             d_assign: float | None = None) -> EvalReport:
    warnings = []
    if not m.instances:
        warnings.append("map is empty; all metrics are zero")
        log.warning(warnings[-1])
    if gt.resolution != m.resolution:
        raise ValidationError(f"GT resolution {gt.resolution} differs from map resolution {m.resolution}")
    n_classes = len(table.names)
    dt = dense_transfer(m, gt.points, table, d_assign)
    dense = segmentation_metrics(confusion_matrix(gt.labels, dt.labels, n_classes))
    ids = sorted(m.instances)
    iou = iou_matrix([m.instances[i].voxels for i in ids], [g.voxels for g in gt.instances])
    results = {}
    matches = []
    for strict in (False, True):
        a = hungarian_match(iou, strict)
        feats = [m.instances[ids[r]].semantic.vector for r, _ in a.pairs]
        classes = [gt.instances[c].cls for _, c in a.pairs]
        results[strict] = retrieval_metrics(feats, classes, table, ks)
        if not strict:
            matches = [{"instance": ids[r], "gt": gt.instances[c].id, "gt_class": gt.instances[c].cls,
                        "iou": v, "rank": gt_rank(m.instances[ids[r]].semantic.vector, table, gt.instances[c].cls)}
                       for (r, c), v in zip(a.pairs, a.ious)]
    return EvalReport(dense, dt.unassigned_fraction, results[False], results[True], matches, warnings)


def per_class_csv(report: EvalReport, table: TextEmbeddingTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "name", "support", "acc", "iou"])
    for row in report.dense.get("per_class", []):
        w.writerow([row["class"], table.names[row["class"]], row["support"], f"{row['acc']:.6f}", f"{row['iou']:.6f}"])
    return buf.getvalue()
