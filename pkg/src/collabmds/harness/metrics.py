"""Detection metrics derived from confusion counts."""

from __future__ import annotations

from dataclasses import dataclass

from ..trace import ConfusionCounts


@dataclass(frozen=True)
class MetricsRow:
    accuracy: float
    precision: float
    recall: float
    f_score: float
    counts: ConfusionCounts
    precision_undefined: bool = False
    recall_undefined: bool = False

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "precision_undefined": self.precision_undefined,
            "recall_undefined": self.recall_undefined,
            **self.counts.as_dict(),
        }


def f_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    s = precision + recall
    return 0.0 if s == 0 else 2 * precision * recall / s


def metrics(counts: ConfusionCounts) -> MetricsRow:
    """Accuracy, precision, recall and F-score.

    Precision (recall) with no predicted (actual) positives is reported as
    0 and flagged.
    """
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    if min(tp, tn, fp, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    total = tp + tn + fp + fn
    if total == 0:
        raise ValueError("all confusion counts are zero")
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    p = 0.0 if p_undef else tp / (tp + fp)
    r = 0.0 if r_undef else tp / (tp + fn)
    return MetricsRow((tp + tn) / total, p, r, f_score(p, r), counts, p_undef, r_undef)
