"""Confusion-matrix evaluation: accuracy, per-class rates, merging, quartiles.

Two per-class error rates are reported side by side because they answer
different questions:

* ``within_class_fp`` -- the share of a ground-truth class that was
  misclassified as anything else (1 - recall).  Overall accuracy is exactly
  ``1 - sum(share_c * within_class_fp_c)``.
* ``conventional_fpr`` -- false alarms for the class over all true
  negatives, i.e. how often other classes are mistaken for this one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, RangeError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64; counts[truth][prediction]
    class_names: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DomainError(f"confusion counts must be square, got {list(self.counts.shape)}")
        if (self.counts < 0).any():
            raise DomainError("confusion counts must be non-negative")
        if len(self.class_names) != self.counts.shape[0]:
            raise DomainError("one class name per row is required")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(predictions, truths, num_classes: int, class_names=None) -> ConfusionMatrix:
    """Count (truth, prediction) pairs into a C x C matrix."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape:
        raise DomainError(
            f"got {predictions.size} predictions for {truths.size} ground truths"
        )
    if predictions.size and not (
        0 <= predictions.min()
        and predictions.max() < num_classes
        and 0 <= truths.min()
        and truths.max() < num_classes
    ):
        raise RangeError(f"labels must be in 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truths, predictions), 1)
    if class_names is None:
        class_names = tuple(f"class{i}" for i in range(num_classes))
    return ConfusionMatrix(counts, tuple(class_names))


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DomainError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / cm.total


@dataclass
class ClassRates:
    name: str
    true_count: int
    recall: float
    within_class_fp: float  # 1 - recall: misclassified share of this truth class
    conventional_fpr: float  # false alarms for this class over true negatives


def per_class_rates(cm: ConfusionMatrix) -> list:
    """Recall and both false-positive readings for every class.

    Every class must have at least one true sample; ``conventional_fpr`` is
    NaN when a class has no true negatives (single-class data).
    """
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    total = cm.total
    out = []
    for c, name in enumerate(cm.class_names):
        if rows[c] == 0:
            raise DomainError(f"class '{name}' has no true samples; its rates are undefined")
        recall = float(cm.counts[c, c]) / float(rows[c])
        negatives = total - int(rows[c])
        fpr = (
            float(cols[c] - cm.counts[c, c]) / negatives if negatives > 0 else math.nan
        )
        out.append(ClassRates(name, int(rows[c]), recall, 1.0 - recall, fpr))
    return out


def accuracy_from_class_rates(shares, within_class_fp) -> float:
    """Overall accuracy implied by per-class shares and within-class FP rates."""
    shares = np.asarray(shares, dtype=np.float64)
    fps = np.asarray(within_class_fp, dtype=np.float64)
    if shares.shape != fps.shape:
        raise DomainError("one FP rate per class share is required")
    return float(1.0 - (shares * fps).sum())


def merge_classes(cm: ConfusionMatrix, groups) -> ConfusionMatrix:
    """Collapse classes into groups (a partition of the class indices)."""
    flat = [i for g in groups for i in g]
    if sorted(flat) != list(range(len(cm.class_names))):
        raise DomainError("groups must partition the class set exactly")
    k = len(groups)
    counts = np.zeros((k, k), dtype=np.int64)
    for gi, gsrc in enumerate(groups):
        for gj, gdst in enumerate(groups):
            counts[gi, gj] = cm.counts[np.ix_(list(gsrc), list(gdst))].sum()
    names = tuple("+".join(cm.class_names[i] for i in g) for g in groups)
    return ConfusionMatrix(counts, names)


def box_stats(values):
    """(median, 25th percentile, 75th percentile) with linear interpolation
    at rank (n - 1) * p."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DomainError("box statistics of an empty list are undefined")
    q = np.quantile(values, [0.5, 0.25, 0.75])
    return float(q[0]), float(q[1]), float(q[2])


def write_metrics_csv(cm: ConfusionMatrix, path):
    """Per-class rates plus an ``overall`` summary row.

    Classes without true samples get blank rate fields instead of failing the
    whole report; NaN conventional rates are blank too.
    """
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    total = cm.total
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "true_count", "recall", "within_class_fp", "conventional_fpr"])
        for c, name in enumerate(cm.class_names):
            if rows[c] == 0:
                writer.writerow([name, 0, "", "", ""])
                continue
            recall = float(cm.counts[c, c]) / float(rows[c])
            negatives = total - int(rows[c])
            fpr = float(cols[c] - cm.counts[c, c]) / negatives if negatives > 0 else None
            writer.writerow(
                [
                    name,
                    int(rows[c]),
                    f"{recall:.6f}",
                    f"{1.0 - recall:.6f}",
                    "" if fpr is None else f"{fpr:.6f}",
                ]
            )
        writer.writerow(["overall", total, f"{accuracy(cm):.6f}", "", ""])
