"""Dice similarity and reduced annotation cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray  # indexed by class 0..C
    fp: np.ndarray
    fn: np.ndarray


def _check(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def confusion_counts(pred, truth, n_classes: int) -> ConfusionCounts:
    """Per-class TP/FP/FN for classes 0..n_classes."""
    pred, truth = _check(pred, truth)
    K = n_classes + 1
    joint = np.bincount(
        truth.ravel().astype(np.int64) * K + pred.ravel().astype(np.int64), minlength=K * K
    ).reshape(K, K)
    tp = np.diag(joint).copy()
    return ConfusionCounts(tp=tp, fp=joint.sum(axis=0) - tp, fn=joint.sum(axis=1) - tp)


def dice(pred, truth, c: int) -> float:
    """2TP / (2TP + FP + FN) for class ``c``; 1.0 if absent from both."""
    pred, truth = _check(pred, truth)
    p, t = pred == c, truth == c
    tp = np.count_nonzero(p & t)
    denom = np.count_nonzero(p) + np.count_nonzero(t)
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def class_dices(pred, truth, n_classes: int) -> np.ndarray:
    """Dice for foreground classes 1..n_classes."""
    cc = confusion_counts(pred, truth, n_classes)
    tp, fp, fn = cc.tp[1:], cc.fp[1:], cc.fn[1:]
    denom = 2 * tp + fp + fn
    return np.where(denom == 0, 1.0, 2.0 * tp / np.maximum(denom, 1))


def mean_dice(pred, truth, n_classes: int) -> float:
    return float(np.mean(class_dices(pred, truth, n_classes)))


def rac(pred, truth) -> float:
    """Reduced annotation cost, 1 - |revised| / |ROI|.

    A pixel needs revision when the prediction is wrong and either the
    truth or the prediction is foreground.  Not clamped: many spurious
    foreground pixels make the value negative.
    """
    pred, truth = _check(pred, truth)
    roi = np.count_nonzero(truth)
    if roi == 0:
        raise ValueError("ground truth has no foreground pixels")
    # a mismatch always involves at least one foreground label
    revised = np.count_nonzero(pred != truth)
    return 1.0 - revised / roi
