"""Segmentation metrics: mIoU and boundary F-score.

Boundary matching uses a square (Chebyshev) slack.  For 2048-pixel-wide
frames the image-relative thresholds 0.00088, 0.001875, 0.00375 and 0.005
correspond to 3, 5, 9 and 12 pixels; desk-scale images take pixel slacks
directly.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import ndimage

BOUNDARY_SLACKS = (3, 5, 9, 12)


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.ndim != 2:
        raise ValueError(f"label maps must be 2-D, got {pred.ndim}-D")
    return pred, gt


def confusion_matrix(pred, gt, num_classes: int, ignore_index: Optional[int] = None) -> np.ndarray:
    """``cm[t, p]`` counts pixels of true class ``t`` predicted as ``p``."""
    pred, gt = _check_pair(pred, gt)
    keep = np.ones(gt.shape, dtype=bool) if ignore_index is None else gt != ignore_index
    p, t = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    for name, arr in (("prediction", p), ("ground truth", t)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} holds labels outside [0, {num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(pred, gt, num_classes: int, ignore_index: Optional[int] = None):
    """Returns ``(mean_iou, per_class_iou)``.

    Classes absent from both maps get NaN and are left out of the mean.
    """
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index))


def iou_from_confusion(cm):
    """``(mean_iou, per_class_iou)`` from a confusion matrix.

    The mean is summed over exact integer ratios and rounded once, so e.g.
    IoUs 1/2 and 2/3 average to the double nearest 7/12.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    ratios = [Fraction(int(t), int(u)) for t, u in zip(tp, union) if u > 0]
    mean = float(sum(ratios) / len(ratios)) if ratios else float("nan")
    return mean, iou


def boundary_mask(mask) -> np.ndarray:
    """Pixels of ``mask`` whose 4-neighbourhood leaves the mask.

    The image border does not count as leaving (edge values replicate).
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1, mode="edge")
    core = m[1:-1, 1:-1]
    differs = (
        (m[:-2, 1:-1] != core) | (m[2:, 1:-1] != core)
        | (m[1:-1, :-2] != core) | (m[1:-1, 2:] != core)
    )
    return core & differs


def _within(target: np.ndarray, slack: int) -> np.ndarray:
    if slack == 0:
        return target
    return ndimage.binary_dilation(target, structure=np.ones((2 * slack + 1, 2 * slack + 1), dtype=bool))


def boundary_fscore(pred, gt, class_id: int, slack_px: int) -> float:
    """F-measure of class ``class_id`` boundary pixels matched within ``slack_px``.

    Identical empty boundaries score 1; one empty side scores 0.
    """
    if slack_px < 0:
        raise ValueError("slack_px must be non-negative")
    pred, gt = _check_pair(pred, gt)
    bp = boundary_mask(pred == class_id)
    bg = boundary_mask(gt == class_id)
    n_pred, n_gt = int(bp.sum()), int(bg.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    precision = (bp & _within(bg, slack_px)).sum() / n_pred
    recall = (bg & _within(bp, slack_px)).sum() / n_gt
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def mean_boundary_fscore(pred, gt, num_classes: int, slack_px: int) -> float:
    """Per-class boundary F averaged over the classes present in either map."""
    pred, gt = _check_pair(pred, gt)
    present = [c for c in range(num_classes) if (pred == c).any() or (gt == c).any()]
    if not present:
        return float("nan")
    return float(np.mean([boundary_fscore(pred, gt, c, slack_px) for c in present]))
