"""Event conditions, multi-label window targets, and label co-occurrence.

Each of the six events fires when its source channel stays past a fixed
threshold for a full minute (30 samples at 2 s). A window anchored at t is
labeled against the segment starting lead_steps ahead of the anchor; in
"any-within" mode the condition may fire anywhere inside a longer event
window.
"""

from __future__ import annotations

import json

import numpy as np

from .schema import (
    ARRHYTHMIA_HIGH_THRESHOLD,
    CHANNEL_INDEX,
    EVENT_NAMES,
    EVENT_STEPS,
    EVENTS,
    N_EVENTS,
)

CO_EPSILON = 1e-8


def event_condition(event: int, segment: np.ndarray) -> int:
    """Evaluate one event condition on a 30-sample segment of its source channel."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.shape != (EVENT_STEPS,):
        raise ValueError(f"segment must have exactly {EVENT_STEPS} samples, got {segment.shape}")
    spec = EVENTS[event]
    if spec.name == "arrhythmia":
        return int(segment.max() < spec.threshold or segment.min() > ARRHYTHMIA_HIGH_THRESHOLD)
    if spec.direction == "below":
        return int(segment.max() < spec.threshold)
    return int(segment.min() > spec.threshold)


def label_window(case, anchor_t: int, lead_steps: int, event_window_steps: int = EVENT_STEPS) -> np.ndarray:
    """Build the 6-bit label vector for the window anchored at sample anchor_t.

    Default event_window_steps=30 checks exactly the segment
    [anchor+lead, anchor+lead+30). A larger value enables any-within mode:
    the label is 1 if any 30-sample sub-window inside
    [anchor+lead, anchor+lead+event_window_steps) satisfies the condition.

    The case must be imputation-complete; thresholds compare physical values.
    """
    if event_window_steps < EVENT_STEPS:
        raise ValueError("event_window_steps must be >= 30")
    n = case.n_samples
    horizon_end = anchor_t + lead_steps + event_window_steps
    if horizon_end > n:
        raise ValueError(f"horizon [{anchor_t + lead_steps}, {horizon_end}) exceeds case length {n}")

    y = np.zeros(N_EVENTS, dtype=np.uint8)
    for i, spec in enumerate(EVENTS):
        series = case.channels[CHANNEL_INDEX[spec.channel]].values
        seg = series[anchor_t + lead_steps : horizon_end]
        for k in range(event_window_steps - EVENT_STEPS + 1):
            if event_condition(i, seg[k : k + EVENT_STEPS]):
                y[i] = 1
                break
    return y


def label_case_windows(
    case, anchors: np.ndarray, lead_steps: int, event_window_steps: int = EVENT_STEPS
) -> np.ndarray:
    """Vectorized label_window over many anchors of one case.

    Computes per-sample rolling min/max once per event channel, so labeling a
    full case is O(n) per event instead of O(n * 30).
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    labels = np.zeros((anchors.size, N_EVENTS), dtype=np.uint8)
    if anchors.size == 0:
        return labels
    n = case.n_samples
    if np.any(anchors + lead_steps + event_window_steps > n) or np.any(anchors < 0):
        raise ValueError("some anchors do not admit the requested horizon")

    n_starts = n - EVENT_STEPS + 1
    for i, spec in enumerate(EVENTS):
        series = case.channels[CHANNEL_INDEX[spec.channel]].values
        windows = np.lib.stride_tricks.sliding_window_view(series, EVENT_STEPS)
        if spec.name == "arrhythmia":
            fires = (windows.max(axis=1) < spec.threshold) | (
                windows.min(axis=1) > ARRHYTHMIA_HIGH_THRESHOLD
            )
        elif spec.direction == "below":
            fires = windows.max(axis=1) < spec.threshold
        else:
            fires = windows.min(axis=1) > spec.threshold
        # Prefix sums let "any sub-window fires" reduce to a range query.
        csum = np.concatenate([[0], np.cumsum(fires)])
        starts = anchors + lead_steps
        ends = np.minimum(starts + (event_window_steps - EVENT_STEPS) + 1, n_starts)
        labels[:, i] = (csum[ends] - csum[starts]) > 0
    return labels


class CoMatrix:
    """Normalized label co-occurrence matrix M / (max M + eps)."""

    def __init__(self, m: np.ndarray, epsilon: float = CO_EPSILON):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("co-occurrence matrix must be square")
        if not np.allclose(m, m.T):
            raise ValueError("co-occurrence matrix must be symmetric")
        self.counts = m
        self.epsilon = float(epsilon)
        self.m = m / (m.max() + self.epsilon)

    @property
    def n_labels(self) -> int:
        return self.m.shape[0]

    def to_json(self, names=EVENT_NAMES) -> str:
        payload = {
            "events": list(names),
            "co_matrix": self.m.tolist(),
            "counts": self.counts.tolist(),
            "epsilon": self.epsilon,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CoMatrix":
        payload = json.loads(text)
        co = cls(np.asarray(payload["counts"], dtype=np.float64), epsilon=payload["epsilon"])
        return co


def co_occurrence(train_labels: np.ndarray, epsilon: float = CO_EPSILON) -> CoMatrix:
    """Y^T Y over the training labels, normalized by its maximum entry.

    Summing per-batch Y^T Y over any partition of the rows gives the same M,
    so the whole-set product is used directly.
    """
    y = np.asarray(train_labels, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("train_labels must be a nonempty N x C matrix")
    m = y.T @ y
    return CoMatrix(m, epsilon=epsilon)
