"""IoU for overlapping multi-label annotations.

A pixel whose predicted class is among its ground-truth labels is a true
positive for the predicted class only; the other co-labels are not charged a
false negative. A prediction outside the label set is a false positive for the
predicted class and a false negative for every ground-truth label of the pixel.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LabelGrid:
    """Multi-hot labels ``[K, H, W]`` plus a validity mask ``[H, W]``."""

    labels: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=bool)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if labels.ndim != 3 or labels.shape[1:] != mask.shape:
            raise MetricError(f"labels {labels.shape} and mask {mask.shape} disagree")
        if np.any(mask & ~labels.any(axis=0)):
            raise MetricError("every valid pixel needs at least one label")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[0]


def iou_counts(preds, targets, valid=None, n_classes=None):
    """Per-class ``(tp, fp, fn)`` integer counts under the overlap protocol.

    ``preds`` is ``[..., H, W]`` of class indices, ``targets`` the matching
    multi-hot ``[..., K, H, W]``, ``valid`` ``[..., H, W]``.
    """
    preds = np.asarray(preds)
    targets = np.asarray(targets, dtype=bool)
    if targets.ndim == preds.ndim + 1 and targets.ndim >= 3:
        k_axis = targets.ndim - 3
        targets = np.moveaxis(targets, k_axis, -1)
    else:
        raise MetricError(f"targets {targets.shape} do not match predictions {preds.shape}")
    if targets.shape[:-1] != preds.shape:
        raise MetricError(f"targets {targets.shape} do not match predictions {preds.shape}")
    k = targets.shape[-1] if n_classes is None else n_classes
    if valid is None:
        valid = np.ones(preds.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != preds.shape:
        raise MetricError(f"valid mask {valid.shape} does not match predictions {preds.shape}")
    if preds.size and (preds.min() < 0 or preds.max() >= k):
        raise MetricError("prediction outside the class list")

    p = preds[valid].astype(np.int64)
    t = targets[valid]
    hit = t[np.arange(p.size), p]
    tp = np.bincount(p[hit], minlength=k)
    fp = np.bincount(p[~hit], minlength=k)
    fn = t[~hit].sum(axis=0).astype(np.int64)
    return tp, fp, fn


def iou_from_counts(tp, fp, fn):
    """Per-class IoU (NaN where the class never occurs) and the mean over defined classes."""
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    defined = denom > 0
    if not defined.any():
        raise MetricError("no class has a nonzero IoU denominator")
    return iou, float(iou[defined].mean())


def miou_overlapped(preds, targets, valid=None, n_classes=None):
    if isinstance(targets, LabelGrid):
        targets, valid = targets.labels, targets.valid_mask if valid is None else valid
    if valid is not None and not np.asarray(valid, dtype=bool).any():
        raise MetricError("no valid pixels to evaluate")
    tp, fp, fn = iou_counts(preds, targets, valid, n_classes)
    if tp.sum() + fp.sum() == 0:
        raise MetricError("no valid pixels to evaluate")
    return iou_from_counts(tp, fp, fn)


def iou_report_csv(class_names, tp, fp, fn) -> str:
    """CSV text: one row per class (name, TP, FP, FN, IoU) and a final mIoU row."""
    iou, miou = iou_from_counts(tp, fp, fn)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "TP", "FP", "FN", "IoU"])
    for name, a, b, c, v in zip(class_names, tp, fp, fn, iou):
        w.writerow([name, int(a), int(b), int(c), "" if np.isnan(v) else repr(float(v))])
    w.writerow(["mIoU", "", "", "", repr(miou)])
    return buf.getvalue()
