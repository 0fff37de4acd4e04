"""Optimal prediction-to-ground-truth assignment and the set-prediction loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Box3D, LabeledBox, giou3d, giou_matrix


@dataclass(frozen=True)
class LossConfig:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    noobj_weight: float = 0.1

    def __post_init__(self):
        for name in ("lambda_iou", "lambda_l1", "noobj_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Assignment:
    pairs: tuple  # ((pred_index, gt_index), ...) in gt order

    @property
    def pred_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    def total(self, cost: np.ndarray) -> float:
        return float(sum(cost[p, g] for p, g in self.pairs))


def hungarian(cost) -> Assignment:
    """Minimum-cost injective map from the M columns (ground truth) to the J rows.

    Shortest augmenting path with row/column potentials, O(M^2 J).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n_pred, n_gt = cost.shape
    if n_gt > n_pred:
        raise ValueError(f"cannot assign {n_gt} ground truths to {n_pred} predictions")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    if n_gt == 0:
        return Assignment(())
    # rows of `a` are ground truths (1-based), columns predictions
    a = cost.T
    n, m = n_gt, n_pred
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = gt row holding prediction column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted((int(j - 1), int(owner[j] - 1)) for j in range(1, m + 1) if owner[j])
    return Assignment(tuple(sorted(pairs, key=lambda pg: pg[1])))


def _as_corners(box) -> np.ndarray:
    return box.corners if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)


def box_loss(pred, gt, cfg: LossConfig = LossConfig()) -> float:
    p, g = _as_corners(pred), _as_corners(gt)
    l1 = float(np.mean(np.abs(p - g)))
    return cfg.lambda_iou * (1.0 - giou3d(p, g)) + cfg.lambda_l1 * l1


def _ce(logits: np.ndarray, target: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[target])


def match_cost(pred_box, pred_logits, gt: LabeledBox, cfg: LossConfig = LossConfig()) -> float:
    return box_loss(pred_box, gt.box, cfg) + _ce(pred_logits, gt.class_id)


def cost_matrix(boxes: np.ndarray, logits: np.ndarray, gts, cfg: LossConfig) -> np.ndarray:
    """J x M matching costs (box loss plus cross-entropy of the GT class)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if not gts:
        return np.zeros((boxes.shape[0], 0))
    g = np.stack([lb.box.corners for lb in gts])
    cls = np.array([lb.class_id for lb in gts])
    l1 = np.abs(boxes[:, None] - g[None]).mean(axis=(2, 3))
    giou = giou_matrix(boxes, g)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return cfg.lambda_iou * (1 - giou) + cfg.lambda_l1 * l1 - logp[:, cls]


def match(boxes: np.ndarray, logits: np.ndarray, gts, cfg: LossConfig = LossConfig()) -> Assignment:
    if len(gts) > boxes.shape[0]:
        raise ValueError(f"{len(gts)} ground-truth objects exceed {boxes.shape[0]} queries")
    return hungarian(cost_matrix(boxes, logits, gts, cfg))


def _safe(x: Tensor) -> Tensor:
    # empty volumes divide as 0/1 so the ratio is 0
    return x + (x.data == 0).astype(x.dtype)


def _volume(lo: Tensor, hi: Tensor) -> Tensor:
    ext = ad.relu(hi - lo)
    return ext[..., 0] * ext[..., 1] * ext[..., 2]


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable hull GIoU between (M, 8, 3) predicted and fixed GT corners."""
    plo, phi = ad.amin(pred, axes=-2), ad.amax(pred, axes=-2)
    glo = Tensor(gt.min(axis=-2).astype(pred.dtype))
    ghi = Tensor(gt.max(axis=-2).astype(pred.dtype))
    inter = _volume(ad.maximum(plo, glo), ad.minimum(phi, ghi))
    union = _volume(plo, phi) + _volume(glo, ghi) - inter
    hull = _volume(ad.minimum(plo, glo), ad.maximum(phi, ghi))
    return inter / _safe(union) - (hull - union) / _safe(hull)


def hungarian_loss(det, gts, cfg: LossConfig = LossConfig(), assignment: Assignment | None = None) -> Tensor:
    """Set-prediction loss for one pose with the matching held constant.

    Matched predictions pay box loss plus cross-entropy on their GT class;
    every other prediction pays ``noobj_weight`` times cross-entropy on the
    no-object class. Terms are summed in prediction order so the result does
    not depend on how the GT list is ordered.
    """
    boxes, logits = det.boxes, det.logits
    n_pred, n_cls = logits.shape[-2], logits.shape[-1]
    if len(gts) > n_pred:
        raise ValueError(f"{len(gts)} ground-truth objects exceed {n_pred} queries")
    if assignment is None:
        assignment = match(boxes.data, logits.data, gts, cfg)
    pairs = sorted(assignment.pairs)
    dtype = logits.dtype

    target = np.full(n_pred, n_cls - 1)
    weight = np.full(n_pred, cfg.noobj_weight, dtype=dtype)
    for p, g in pairs:
        target[p] = gts[g].class_id
        weight[p] = 1.0
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(n_pred), target]
    loss = -(picked * weight).sum()

    if pairs:
        pred_idx = np.array([p for p, _ in pairs])
        gt_corners = np.stack([gts[g].box.corners for _, g in pairs]).astype(dtype)
        matched = boxes[pred_idx]
        giou = giou_tensor(matched, gt_corners)
        l1 = ad.abs(matched - Tensor(gt_corners)).mean(axes=(-2, -1))
        per_pair = (1.0 - giou) * cfg.lambda_iou + l1 * cfg.lambda_l1
        loss = loss + per_pair.sum()
    return loss
