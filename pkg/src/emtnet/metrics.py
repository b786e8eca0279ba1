"""Classification and segmentation metrics, plus cross-validation aggregation.

Undefined ratios (zero denominators, or a metric that a single-task variant
never produces) are carried as ``None`` rather than silently coerced to 0/1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "classify_confusion",
    "seg_scores",
    "report_from_parts",
    "kfold_aggregate",
]


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def acc(self):
        return (self.tp + self.tn) / self.total if self.total else None

    def sen(self):
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    def spe(self):
        neg = self.tn + self.fp
        return self.tn / neg if neg else None


@dataclass
class MetricsReport:
    """Flat evaluation record; ``None`` marks an undefined or absent metric."""

    acc: float | None = None
    sen: float | None = None
    spe: float | None = None
    dsc: float | None = None
    iou: float | None = None
    n_samples: int = 0
    confusion: ConfusionCounts | None = None

    FIELDS = ("acc", "sen", "spe", "dsc", "iou")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.FIELDS}
        d["n_samples"] = self.n_samples
        return d


def classify_confusion(probs, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Threshold probabilities (malignant = positive = 1) and count outcomes."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if probs.shape != labels.shape:
        raise ValueError(f"classify_confusion: {probs.shape[0]} probs vs {labels.shape[0]} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("classify_confusion: labels must be binary 0/1")
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def seg_scores(pred_mask, true_mask, threshold: float = 0.5):
    """(DSC, IoU) of a predicted mask against a binary ground truth.

    The prediction is binarized at ``threshold`` first.  Two empty masks are a
    perfect match: (1.0, 1.0).
    """
    pred_mask = np.asarray(pred_mask, dtype=np.float64)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(
            f"seg_scores: prediction shape {pred_mask.shape} != truth shape {true_mask.shape}"
        )
    if not np.all((true_mask == 0) | (true_mask == 1)):
        raise ValueError("seg_scores: true mask must be binary 0/1")
    a = pred_mask >= threshold
    b = true_mask == 1
    inter = int(np.sum(a & b))
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0, 1.0
    dsc = 2.0 * inter / (int(np.sum(a)) + int(np.sum(b)))
    iou = inter / union
    return dsc, iou


def report_from_parts(confusion: ConfusionCounts | None = None,
                      dsc_values=None, iou_values=None,
                      n_samples: int = 0) -> MetricsReport:
    """Assemble a report from a confusion table and/or per-image mask scores."""
    rep = MetricsReport(n_samples=n_samples)
    if confusion is not None:
        rep.confusion = confusion
        rep.acc = confusion.acc()
        rep.sen = confusion.sen()
        rep.spe = confusion.spe()
    if dsc_values is not None and len(dsc_values):
        rep.dsc = float(np.mean(dsc_values))
    if iou_values is not None and len(iou_values):
        rep.iou = float(np.mean(iou_values))
    return rep


def kfold_aggregate(per_fold_reports) -> MetricsReport:
    """Unweighted mean of each metric across folds; None values stay None."""
    reports = list(per_fold_reports)
    if not reports:
        raise ValueError("kfold_aggregate: need at least one fold report")
    out = MetricsReport(n_samples=sum(r.n_samples for r in reports))
    for name in MetricsReport.FIELDS:
        values = [getattr(r, name) for r in reports]
        if all(v is None for v in values):
            continue
        if any(v is None for v in values):
            values = [v for v in values if v is not None]
        setattr(out, name, float(np.mean(values)))
    return out
