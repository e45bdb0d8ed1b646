"""Slot-to-pseudo-mask assignment and the training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError

BCE_CLAMP = 1e-7


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks score 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Pairwise IoU between the rows of two (M, N) / (F, N) boolean stacks."""
    p = np.asarray(pred, dtype=bool).reshape(len(pred), -1).astype(np.float64)
    t = np.asarray(target, dtype=bool).reshape(len(target), -1).astype(np.float64)
    if p.shape[1] != t.shape[1]:
        raise DimensionError(f"mask sizes differ: {p.shape[1]} vs {t.shape[1]}")
    inter = p @ t.T
    union = p.sum(1)[:, None] + t.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass
class Assignment:
    matrix: np.ndarray               # (O, F) binary
    pairs: list[tuple[int, int]]
    total: float


def _min_cost_square(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method; returns the column of each row."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)   # owner[j] = row (1-based) holding column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    cols[owner[1:] - 1] = np.arange(n)
    return cols


def hungarian_match(cost: np.ndarray, maximize: bool = True) -> Assignment:
    """Optimal one-to-one assignment between rows and columns.

    Rectangular inputs are padded with zero-benefit dummies; pairs involving a
    dummy are dropped, so exactly ``min(O, F)`` real pairs are returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost must be 2-D, got shape {c.shape}")
    o, f = c.shape
    if o == 0 or f == 0:
        return Assignment(np.zeros((o, f), dtype=np.int64), [], 0.0)
    if not np.isfinite(c).all():
        raise InputError("cost matrix must be finite")
    n = max(o, f)
    square = np.zeros((n, n))
    square[:o, :f] = -c if maximize else c
    cols = _min_cost_square(square)
    pairs = [(i, int(cols[i])) for i in range(o) if cols[i] < f]
    matrix = np.zeros((o, f), dtype=np.int64)
    for i, j in pairs:
        matrix[i, j] = 1
    return Assignment(matrix, pairs, float(sum(c[i, j] for i, j in pairs)))


def slot_masks_from_attention(attn) -> Tensor:
    """Foreground-slot soft masks: every attention column except the background slot 0."""
    attn = ad.as_tensor(attn)
    return attn[..., 1:]


def match_slots_to_pseudo(attn: np.ndarray, pseudo: np.ndarray) -> Assignment:
    """Match foreground slots to pseudo-mask segments by IoU of argmax-hard slot masks.

    ``attn`` is (N, K) with slot 0 the background; ``pseudo`` is (F, N).
    Returned pair indices address foreground slots (0 == attention column 1).
    """
    a = np.asarray(attn)
    pseudo = np.asarray(pseudo, dtype=bool).reshape(len(pseudo), -1)
    if len(pseudo) == 0:
        return Assignment(np.zeros((a.shape[1] - 1, 0), dtype=np.int64), [], 0.0)
    hard = a.argmax(axis=1)
    slot_masks = np.stack([hard == k for k in range(1, a.shape[1])])
    return hungarian_match(iou_matrix(slot_masks, pseudo), maximize=True)


def reconstruction_loss(x, x_hat) -> Tensor:
    """Mean squared error over tokens and feature channels (and batch)."""
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"reconstruction shape {x_hat.shape} != target {x.shape}")
    return ad.mean(ad.square(x_hat - x))


def matched_bce_loss(soft_masks, pseudo, assignments) -> Tensor:
    """Binary cross-entropy between matched slot masks and their pseudo-masks.

    ``soft_masks`` is (N, O) or (B, N, O); ``pseudo`` / ``assignments`` are a
    (F, N) array and an :class:`Assignment`, or lists of them per sample.  Per
    sample the loss averages over matched pairs (each pair averaged over
    tokens); samples are then averaged.  A sample without pairs adds 0.
    """
    soft = ad.as_tensor(soft_masks)
    batched = soft.ndim == 3
    if not batched:
        soft = soft.reshape((1,) + soft.shape)
        pseudo, assignments = [pseudo], [assignments]
    b, n, o = soft.shape
    if len(pseudo) != b or len(assignments) != b:
        raise DimensionError("need one pseudo-mask set and assignment per sample")
    target = np.zeros((b, n, o))
    pair_weight = np.zeros((b, o))
    for s, (masks, assign) in enumerate(zip(pseudo, assignments)):
        if not assign.pairs:
            continue
        masks = np.asarray(masks).reshape(len(masks), -1)
        for i, j in assign.pairs:
            target[s, :, i] = masks[j]
            pair_weight[s, i] = 1.0 / len(assign.pairs)
    if not pair_weight.any():
        return ad.sum_(soft * 0.0)
    p = ad.clip(soft, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ce = -(target * ad.log(p) + (1.0 - target) * ad.log(1.0 - p))
    per_slot = ad.mean(ce, axis=1)                    # (B, O)
    return ad.sum_(per_slot * pair_weight) / b


@dataclass
class LossBreakdown:
    l_rec: float
    l_bce: float
    lam: float
    total: float
    tensor: Tensor | None = None


def total_loss(l_rec, l_bce, lam: float = 0.05) -> LossBreakdown:
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    rec_t, bce_t = ad.as_tensor(l_rec), ad.as_tensor(l_bce)
    tot = rec_t + lam * bce_t if lam else rec_t
    r, c = rec_t.item(), bce_t.item()
    return LossBreakdown(r, c, lam, r + lam * c, tot)
