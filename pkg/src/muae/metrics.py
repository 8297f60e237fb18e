"""Multi-label evaluation: pooled micro scores, rank-based macro AUC, Hamming loss."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .schema import EVENT_NAMES


def _binarize(probs: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.int64)


def micro_scores(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> tuple:
    """Pool all N*C label decisions into one confusion matrix.

    Returns (precision, recall, f1, accuracy, hamming). Accuracy is the
    complement of the Hamming loss, so the two sum to 1 exactly.
    """
    labels = np.asarray(labels).astype(np.int64)
    if labels.ndim != 2 or labels.shape[0] < 1:
        raise ValueError("labels must be a nonempty N x C matrix")
    pred = _binarize(probs, threshold)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    total = labels.size
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    hamming = (fp + fn) / total
    accuracy = 1.0 - hamming
    return precision, recall, f1, accuracy, hamming


def binary_auc(scores: np.ndarray, targets: np.ndarray) -> float:
    """ROC AUC through the rank statistic; tied scores earn half credit.

    NaN when the column lacks a positive or a negative.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    n_pos = int(targets.sum())
    n_neg = targets.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks over ties
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    rank_sum = ranks[targets].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def macro_auc(probs: np.ndarray, labels: np.ndarray) -> tuple:
    """Mean per-class AUC over classes with both outcomes present.

    Returns (macro, per_class, excluded) where per_class holds NaN for
    undefined columns and excluded lists their indices. Raises when no class
    is defined.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    per_class = np.array([binary_auc(probs[:, c], labels[:, c]) for c in range(labels.shape[1])])
    defined = ~np.isnan(per_class)
    if not defined.any():
        raise ValueError("AUC undefined: no class has both a positive and a negative")
    excluded = [int(c) for c in np.flatnonzero(~defined)]
    return float(per_class[defined].mean()), per_class, excluded


@dataclass
class EvalReport:
    micro_f1: float
    micro_precision: float
    micro_recall: float
    micro_accuracy: float
    macro_auc: float
    hamming: float
    per_event: dict = field(default_factory=dict)
    threshold: float = 0.5
    n_samples: int = 0
    excluded_auc_events: list = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "micro_f1": self.micro_f1,
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_accuracy": self.micro_accuracy,
            "macro_auc": self.macro_auc,
            "hamming": self.hamming,
            "per_event": self.per_event,
            "threshold": self.threshold,
            "n_samples": self.n_samples,
            "excluded_auc_events": self.excluded_auc_events,
        }
        return json.dumps(payload, indent=2)


def evaluate(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5,
             event_names: tuple = EVENT_NAMES) -> EvalReport:
    """Full multi-label report for one set of predicted probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if labels.shape[1] != len(event_names):
        event_names = tuple(f"label_{c}" for c in range(labels.shape[1]))
    precision, recall, f1, accuracy, hamming = micro_scores(probs, labels, threshold)
    macro, per_class, excluded = macro_auc(probs, labels)
    pred = _binarize(probs, threshold)
    per_event = {}
    for c, name in enumerate(event_names):
        tp = int(np.sum((pred[:, c] == 1) & (labels[:, c] == 1)))
        fp = int(np.sum((pred[:, c] == 1) & (labels[:, c] == 0)))
        fn = int(np.sum((pred[:, c] == 0) & (labels[:, c] == 1)))
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        event_f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        auc = per_class[c]
        per_event[name] = {"f1": event_f1, "auc": None if math.isnan(auc) else float(auc)}
    return EvalReport(
        micro_f1=f1,
        micro_precision=precision,
        micro_recall=recall,
        micro_accuracy=accuracy,
        macro_auc=macro,
        hamming=hamming,
        per_event=per_event,
        threshold=threshold,
        n_samples=labels.shape[0],
        excluded_auc_events=[event_names[c] for c in excluded],
    )
