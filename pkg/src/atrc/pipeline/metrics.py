"""Per-task evaluation metrics and the metrics report container."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUNDARY_THRESHOLDS = np.arange(1, 21) / 21.0


@dataclass
class MetricsReport:
    values: dict[str, float]
    run_id: str = ""
    extras: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, task: str) -> float:
        return self.values[task]


def confusion_matrix(pred: np.ndarray, target: np.ndarray, n_classes: int) -> np.ndarray:
    idx = target.ravel().astype(np.int64) * n_classes + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    """Mean IoU over classes that occur in prediction or ground truth."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    present = union > 0
    return float((tp[present] / union[present]).mean())


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def mean_angular_error(pred: np.ndarray, target: np.ndarray) -> float:
    """Degrees, channel axis 1, predictions rescaled to unit length."""
    p = pred.astype(np.float64)
    p = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    t = target.astype(np.float64)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    cos = np.clip((p * t).sum(axis=1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def _dilate(mask: np.ndarray) -> np.ndarray:
    """3 x 3 binary dilation over the last two axes."""
    out = mask.copy()
    h, w = mask.shape[-2:]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            src = mask[..., max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)]
            out[..., max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)] |= src
    return out


def boundary_f_counts(prob: np.ndarray, target: np.ndarray, thresholds=BOUNDARY_THRESHOLDS) -> np.ndarray:
    """Per threshold: [matched predictions, predictions, matched GT, GT] with 1-pixel tolerance."""
    gt = target.astype(bool)
    gt_near = _dilate(gt)
    counts = np.zeros((len(thresholds), 4), dtype=np.int64)
    for i, th in enumerate(thresholds):
        p = prob >= th
        counts[i] = (np.sum(p & gt_near), np.sum(p), np.sum(gt & _dilate(p)), np.sum(gt))
    return counts


def f_measure_from_counts(counts: np.ndarray) -> float:
    best = 0.0
    for tp_p, n_p, tp_g, n_g in counts:
        if n_p == 0 and n_g == 0:
            return 1.0
        prec = tp_p / n_p if n_p else 0.0
        rec = tp_g / n_g if n_g else 0.0
        if prec + rec > 0:
            best = max(best, 2 * prec * rec / (prec + rec))
    return float(best)


def boundary_f_measure(prob: np.ndarray, target: np.ndarray) -> float:
    """Best F over 20 evenly spaced thresholds, 1-pixel matching tolerance."""
    return f_measure_from_counts(boundary_f_counts(prob, target))
