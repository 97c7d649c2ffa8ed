"""Classification metrics, the composite challenge score, and Cohen's kappa.

Undefined rates are reported as explicit flags (None plus a reason),
never silently zero, and the composite score refuses to fabricate a
value from them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    """Raised for metric preconditions (single-class labels, bad ranges)."""


@dataclass
class MetricsReport:
    """Confusion-matrix rates plus ranking metrics for a binary task."""

    auc: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    balanced_accuracy: float | None = None
    f1: float | None = None
    accuracy: float | None = None
    composite_score: float | None = None
    threshold: float | None = None
    n_pos: int = 0
    n_neg: int = 0
    undefined: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "auc": self.auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "balanced_accuracy": self.balanced_accuracy,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "composite_score": self.composite_score,
            "threshold": self.threshold,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "undefined": self.undefined,
        }


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic.

    Equals P(score_pos > score_neg) + 0.5 * P(tie) over all
    positive/negative pairs. Ties handled exactly through midranks.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be equal-length 1D vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_metrics(preds, labels, threshold: float | None = None) -> MetricsReport:
    """Sensitivity, specificity, balanced accuracy, F1 and accuracy.

    preds may be hard 0/1 decisions or scores; pass a threshold to
    binarize scores (score >= threshold -> 1). Rates that are undefined
    for the given label mix are flagged, not zeroed.
    """
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise MetricError("preds and labels must be equal-length 1D vectors")
    if threshold is not None:
        preds = (preds >= threshold).astype(int)
    else:
        uniq = set(np.unique(preds).tolist())
        if not uniq <= {0.0, 1.0}:
            raise MetricError("preds must be binary unless a threshold is given")
        preds = preds.astype(int)

    tp = int(((preds == 1) & (labels == 1)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())

    rep = MetricsReport(threshold=threshold, n_pos=tp + fn, n_neg=tn + fp)
    rep.accuracy = (tp + tn) / len(labels)

    if tp + fn > 0:
        rep.sensitivity = tp / (tp + fn)
    else:
        rep.undefined["sensitivity"] = "no positive labels"
    if tn + fp > 0:
        rep.specificity = tn / (tn + fp)
    else:
        rep.undefined["specificity"] = "no negative labels"
    if rep.sensitivity is not None and rep.specificity is not None:
        rep.balanced_accuracy = (rep.sensitivity + rep.specificity) / 2.0
    else:
        rep.undefined["balanced_accuracy"] = "sensitivity or specificity undefined"

    if tp + fp > 0 and tp + fn > 0:
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        if precision + recall > 0:
            rep.f1 = 2 * precision * recall / (precision + recall)
        else:
            rep.f1 = 0.0
    else:
        rep.undefined["f1"] = "no predicted positives or no positive labels"
    return rep


def composite_score(auc, balanced_accuracy, sensitivity, specificity) -> float:
    """Challenge ranking score: 0.4*AUC + 0.2*(BA + sens + spec)."""
    parts = {
        "auc": auc,
        "balanced_accuracy": balanced_accuracy,
        "sensitivity": sensitivity,
        "specificity": specificity,
    }
    for name, v in parts.items():
        if v is None:
            raise MetricError(f"composite_score refuses undefined input {name}")
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"{name}={v} outside [0,1]")
    return 0.4 * auc + 0.2 * balanced_accuracy + 0.2 * sensitivity + 0.2 * specificity


def cohens_kappa(ratings_a, ratings_b) -> float:
    """Chance-adjusted agreement between two categorical sequences.

    kappa = (p_o - p_e) / (1 - p_e) with marginal-product expected
    agreement. When both raters are constant and identical (p_e == 1)
    kappa is defined as 1.0 by convention, with a warning.
    """
    a = np.asarray(ratings_a)
    b = np.asarray(ratings_b)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise MetricError("ratings must be equal-length non-empty 1D sequences")
    n = len(a)
    p_o = float((a == b).mean())
    cats = np.unique(np.concatenate([a, b]))
    p_e = sum(float((a == c).mean()) * float((b == c).mean()) for c in cats)
    if abs(1.0 - p_e) < 1e-12:
        warnings.warn("both raters constant and identical; kappa defined as 1.0 by convention")
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def full_report(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """AUC plus thresholded confusion metrics and the composite score."""
    rep = confusion_metrics(scores, labels, threshold=threshold)
    rep.auc = roc_auc(scores, labels)
    if not rep.undefined:
        rep.composite_score = composite_score(
            rep.auc, rep.balanced_accuracy, rep.sensitivity, rep.specificity
        )
    return rep
