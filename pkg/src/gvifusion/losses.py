"""Focal and Dice losses over per-pixel class probabilities, with their gradients.

Shapes: ``probs`` is ``[N, K, H, W]``, ``targets`` a boolean multi-hot array of
the same shape and ``valid`` a boolean ``[N, H, W]`` mask. Single images
(``[K, H, W]`` / ``[H, W]``) are accepted and treated as a batch of one.
"""
from __future__ import annotations

import numpy as np

from gvifusion.diffcore import DivergenceError

FOCAL_WEIGHT = 0.75
DICE_WEIGHT = 0.25


def _prep(probs, targets, valid):
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=bool)
    if p.ndim == 3:
        p, t = p[None], t[None]
        valid = None if valid is None else np.asarray(valid)[None]
    if p.ndim != 4 or p.shape != t.shape:
        raise ValueError(f"probs {p.shape} and targets {t.shape} must match as [N, K, H, W]")
    if valid is None:
        valid = np.ones((p.shape[0],) + p.shape[2:], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (p.shape[0],) + p.shape[2:]:
        raise ValueError(f"valid mask shape {valid.shape} does not match probs {p.shape}")
    return p, t, valid


def _target_prob(p, t, valid):
    """Probability and class index of the best-scoring target class at each pixel."""
    if np.any(valid & ~t.any(axis=1)):
        raise ValueError("a valid pixel has no target label")
    masked = np.where(t, p, -np.inf)
    idx = masked.argmax(axis=1)
    pt = np.take_along_axis(p, idx[:, None], axis=1)[:, 0]
    return pt, idx


def focal_loss(probs, targets, valid=None, gamma: float = 2.0) -> float:
    """Mean over valid pixels of ``-(1 - p_t)^gamma * log(p_t)``.

    For multi-label pixels ``p_t`` is the largest probability among the target classes.
    """
    p, t, valid = _prep(probs, targets, valid)
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    count = int(valid.sum())
    if count == 0:
        return 0.0
    pt, _ = _target_prob(p, t, valid)
    pt = pt[valid]
    if np.any(pt <= 0.0):
        raise DivergenceError("zero probability assigned to a target class")
    return float(np.sum(-((1.0 - pt) ** gamma) * np.log(pt)) / count)


def focal_loss_backward(probs, targets, valid=None, gamma: float = 2.0) -> np.ndarray:
    p, t, valid = _prep(probs, targets, valid)
    grad = np.zeros_like(p)
    count = int(valid.sum())
    if count == 0:
        return grad
    pt, idx = _target_prob(p, t, valid)
    safe = np.where(valid, pt, 1.0)
    if np.any(safe <= 0.0):
        raise DivergenceError("zero probability assigned to a target class")
    q = 1.0 - safe
    if gamma == 0:
        d = -1.0 / safe
    else:
        d = gamma * q ** (gamma - 1.0) * np.log(safe) - q ** gamma / safe
    d = np.where(valid, d, 0.0) / count
    np.put_along_axis(grad, idx[:, None], d[:, None], axis=1)
    return grad


def _dice_terms(p, t, valid, smooth):
    w = valid[:, None].astype(np.float64)
    tf = t.astype(np.float64) * w
    pw = p * w
    inter = (pw * tf).sum(axis=(0, 2, 3))
    psum = pw.sum(axis=(0, 2, 3))
    tsum = tf.sum(axis=(0, 2, 3))
    return inter, psum + tsum + smooth, tf, w


def dice_loss(probs, targets, valid=None, smooth: float = 1.0) -> float:
    """``1 - mean_c (2 sum(p t) + s) / (sum p + sum t + s)`` over valid pixels."""
    p, t, valid = _prep(probs, targets, valid)
    inter, denom, _, _ = _dice_terms(p, t, valid, smooth)
    return float(1.0 - np.mean((2.0 * inter + smooth) / denom))


def dice_loss_backward(probs, targets, valid=None, smooth: float = 1.0) -> np.ndarray:
    p, t, valid = _prep(probs, targets, valid)
    inter, denom, tf, w = _dice_terms(p, t, valid, smooth)
    k = p.shape[1]
    a = (2.0 / denom)[None, :, None, None]
    b = ((2.0 * inter + smooth) / denom ** 2)[None, :, None, None]
    return -(a * tf - b * w) / k


def combined_loss(probs, targets, valid=None, weights=(FOCAL_WEIGHT, DICE_WEIGHT),
                  gamma: float = 2.0) -> float:
    wf, wd = weights
    return wf * focal_loss(probs, targets, valid, gamma) + wd * dice_loss(probs, targets, valid)


def combined_loss_backward(probs, targets, valid=None, weights=(FOCAL_WEIGHT, DICE_WEIGHT),
                           gamma: float = 2.0) -> np.ndarray:
    wf, wd = weights
    return (wf * focal_loss_backward(probs, targets, valid, gamma)
            + wd * dice_loss_backward(probs, targets, valid))
