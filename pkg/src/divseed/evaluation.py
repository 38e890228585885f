"""Confusion matrices, per-class IoU, and mean IoU.

Rows are ground truth, columns are predictions, both over C+1 labels with
background last. Accumulation is plain addition, so per-image matrices can be
computed in any order (or in parallel) and summed. The mean IoU averages only
over classes that occur in truth or prediction; classes absent from both are
excluded from the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMatrix:
    n_labels: int
    counts: np.ndarray | None = None  # (n_labels, n_labels) int64

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_labels, self.n_labels), dtype=np.int64)
        if self.counts.shape != (self.n_labels, self.n_labels):
            raise DataError("confusion counts shape mismatch")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, predicted: np.ndarray, truth: np.ndarray
               ) -> ConfusionMatrix:
    """Add one prediction/truth pair of label grids into the matrix."""
    pred = np.asarray(predicted).ravel()
    true = np.asarray(truth).ravel()
    if pred.shape != true.shape:
        raise DataError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    n = cm.n_labels
    if pred.min() < 0 or pred.max() >= n or true.min() < 0 or true.max() >= n:
        raise DataError(f"labels out of range [0, {n})")
    flat = true * n + pred
    cm.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
    return cm


@dataclass
class EvalReport:
    per_class_iou: list[float]  # nan where the class is absent from both
    miou: float
    pixel_accuracy: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_iou": [
                None if np.isnan(v) else float(v) for v in self.per_class_iou
            ],
            "miou": float(self.miou),
            "pixel_accuracy": float(self.pixel_accuracy),
            "config": self.config,
        }


def miou(cm: ConfusionMatrix, config: dict | None = None) -> EvalReport:
    """Per-class IoU = TP / (TP + FP + FN); mean over classes present in
    truth or prediction."""
    if cm.total == 0:
        raise DataError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.full(cm.n_labels, np.nan)
    iou[present] = tp[present] / denom[present]
    return EvalReport(
        per_class_iou=[float(v) for v in iou],
        miou=float(iou[present].mean()),
        pixel_accuracy=float(tp.sum() / counts.sum()),
        config=dict(config or {}),
    )
