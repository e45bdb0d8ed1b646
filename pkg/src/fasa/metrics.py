"""Segmentation quality: best overlap, Hungarian mIoU, FG-ARI and saliency scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError
from .matching import hungarian_match, iou, iou_matrix


@dataclass
class SegmentationPrediction:
    masks: np.ndarray      # (S, N) bool, a partition of the patches
    source: str = "alpha"

    @classmethod
    def from_soft(cls, soft: np.ndarray, source: str = "alpha") -> "SegmentationPrediction":
        """Hard masks from (S, N) soft masks by argmax over slots."""
        soft = np.asarray(soft)
        labels = soft.argmax(axis=0)
        return cls(np.stack([labels == s for s in range(soft.shape[0])]), source)

    @property
    def num_slots(self) -> int:
        return len(self.masks)

    def labels(self) -> np.ndarray:
        return self.masks.argmax(axis=0)


@dataclass
class GroundTruth:
    instance_masks: np.ndarray   # (I, N) bool, pairwise disjoint
    instance_ids: np.ndarray
    class_ids: np.ndarray

    @property
    def fg(self) -> np.ndarray:
        return self.instance_masks.any(axis=0) if len(self.instance_masks) else np.zeros(0, bool)

    def labels(self, n: int | None = None) -> np.ndarray:
        """Per-patch instance index (1-based), 0 for background."""
        n = self.instance_masks.shape[1] if n is None else n
        out = np.zeros(n, dtype=np.int64)
        for i, m in enumerate(self.instance_masks):
            out[m] = i + 1
        return out

    def class_masks(self) -> np.ndarray:
        """One mask per class: the union of that class's instances."""
        classes = sorted(set(int(c) for c in self.class_ids))
        return np.stack([self.instance_masks[self.class_ids == c].any(axis=0) for c in classes])


def _stack(masks) -> np.ndarray:
    arr = np.asarray(masks, dtype=bool)
    return arr.reshape(len(arr), -1) if arr.ndim != 2 else arr


def mean_best_overlap(pred_masks, gt_masks) -> float:
    """Average over ground-truth masks of the best IoU any predicted mask achieves."""
    pred, gt = _stack(pred_masks), _stack(gt_masks)
    if len(gt) == 0:
        raise InputError("mean best overlap is undefined without ground-truth masks")
    if len(pred) == 0:
        return 0.0
    return float(iou_matrix(gt, pred).max(axis=1).mean())


def mbo_instance(pred: SegmentationPrediction, gt: GroundTruth) -> float:
    return mean_best_overlap(pred.masks, gt.instance_masks)


def mbo_class(pred: SegmentationPrediction, gt: GroundTruth) -> float:
    return mean_best_overlap(pred.masks, gt.class_masks())


def hungarian_miou(pred_masks, gt_masks) -> float:
    """One-to-one matching maximising total IoU; unmatched ground truth counts as 0."""
    pred, gt = _stack(pred_masks), _stack(gt_masks)
    if len(gt) == 0:
        raise InputError("mIoU is undefined without ground-truth masks")
    if len(pred) == 0:
        return 0.0
    if pred.shape[1] != gt.shape[1]:
        raise DimensionError("prediction and ground truth live on different grids")
    cost = iou_matrix(gt, pred)
    assign = hungarian_match(cost, maximize=True)
    return assign.total / len(gt)


def _comb2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """ARI from the contingency table of two labelings."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError("labelings differ in length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / _comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both labelings trivial (single cluster or all singletons): identical structure
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def fg_ari(pred_labels: np.ndarray, gt_labels: np.ndarray, fg_mask: np.ndarray) -> float:
    """ARI restricted to ground-truth foreground patches."""
    fg = np.asarray(fg_mask, dtype=bool).reshape(-1)
    if fg.sum() < 2:
        raise InputError("FG-ARI needs at least two foreground patches")
    return adjusted_rand_index(np.asarray(pred_labels).reshape(-1)[fg], np.asarray(gt_labels).reshape(-1)[fg])


@dataclass
class SaliencyScores:
    acc: float
    iou: float
    f_beta: float


def saliency_metrics(pred_fg, gt_fg, beta2: float = 0.3) -> SaliencyScores:
    p = np.asarray(getattr(pred_fg, "bits", pred_fg), dtype=bool).reshape(-1)
    g = np.asarray(getattr(gt_fg, "bits", gt_fg), dtype=bool).reshape(-1)
    if p.shape != g.shape:
        raise DimensionError("saliency masks differ in size")
    acc = float((p == g).mean())
    tp = float((p & g).sum())
    precision = tp / p.sum() if p.sum() else None
    recall = tp / g.sum() if g.sum() else None
    if precision is None or recall is None or beta2 * precision + recall == 0:
        f = 0.0
    else:
        f = (1.0 + beta2) * precision * recall / (beta2 * precision + recall)
    return SaliencyScores(acc, iou(p, g), float(f))
