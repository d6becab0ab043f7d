"""Dense surrogate detection objective on the F3 grid.

Not a real detector: each box is assigned to the single F3 cell containing
its centre, and the head predicts objectness, multi-label classes and a
4-number box encoding per cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.metrics import average_precision_score, roc_auc_score

from .diffcore import Tensor, smooth_l1
from .labels import AnnotatedScene
from .losses import DEFAULT_EPS, binary_cross_entropy
from .net import DetOutput


@dataclass
class DetectionTargets:
    objectness: np.ndarray  # (N, 1, H, W)
    classes: np.ndarray  # (N, K, H, W)
    boxes: np.ndarray  # (N, 4, H, W)


def encode_targets(
    scenes: Sequence[AnnotatedScene], grid: tuple[int, int], stride: int, num_classes: int
) -> DetectionTargets:
    n = len(scenes)
    h, w = grid
    obj = np.zeros((n, 1, h, w))
    cls = np.zeros((n, num_classes, h, w))
    box = np.zeros((n, 4, h, w))
    for s_idx, scene in enumerate(scenes):
        # larger boxes written last win the regression target of a shared cell
        for b in sorted(scene.boxes, key=lambda b: b.area):
            cx, cy = (b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0
            i = min(int(cy // stride), h - 1)
            j = min(int(cx // stride), w - 1)
            obj[s_idx, 0, i, j] = 1.0
            cls[s_idx, b.class_id, i, j] = 1.0
            box[s_idx, :, i, j] = (
                cx / stride - j,
                cy / stride - i,
                np.log((b.x1 - b.x0) / stride),
                np.log((b.y1 - b.y0) / stride),
            )
    return DetectionTargets(obj, cls, box)


def loss_det(pred: DetOutput, targets: DetectionTargets, eps: float = DEFAULT_EPS) -> Tensor:
    """Objectness BCE summed over all cells, plus class BCE and smooth-L1 box
    error over positive cells; everything divided by the positive count
    (at least 1) so the sparse positives are not swamped by background."""
    mask = targets.objectness
    n_pos = float(mask.sum())
    obj_loss = binary_cross_entropy(pred.objectness, targets.objectness, eps).sum() * (1.0 / max(n_pos, 1.0))
    if n_pos == 0:
        return obj_loss
    cls_loss = (binary_cross_entropy(pred.classes, targets.classes, eps) * mask).sum() * (1.0 / n_pos)
    box_loss = (smooth_l1(pred.boxes - targets.boxes) * mask).sum() * (1.0 / n_pos)
    return obj_loss + cls_loss + box_loss


def objectness_scores(pred_obj: np.ndarray, targets: DetectionTargets) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(pred_obj).reshape(-1), targets.objectness.reshape(-1)


def objectness_ap(pred_obj: np.ndarray, targets: DetectionTargets) -> float:
    """Per-cell objectness average precision; 0 if there are no positives."""
    scores, labels = objectness_scores(pred_obj, targets)
    if labels.sum() == 0:
        return 0.0
    return float(average_precision_score(labels, scores))


def objectness_auc(pred_obj: np.ndarray, targets: DetectionTargets) -> float:
    scores, labels = objectness_scores(pred_obj, targets)
    if labels.min() == labels.max():
        return float("nan")
    return float(roc_auc_score(labels, scores))
