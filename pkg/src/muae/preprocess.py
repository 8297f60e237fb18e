"""Raw case records to normalized, windowed model inputs.

Order of operations per case: resample (when ingesting irregular data),
impute, convert infusion volumes to rates, then slice normalized windows.
Normalization statistics are fit on the training split once and reused
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schema import (
    CHANNELS,
    CHANNEL_INDEX,
    EVENT_STEPS,
    N_CHANNELS,
    N_STATICS,
    SAMPLE_PERIOD_S,
    STATIC_FIELDS,
    STATIC_MINMAX,
    VOLUME_CHANNELS,
    WINDOW_STEPS,
)
from .synthgen import CaseRecord, ChannelSeries

STD_FLOOR = 1e-6


def resample_channel(raw: list, name: str, period_s: float = SAMPLE_PERIOD_S) -> ChannelSeries:
    """Resample irregular (time, value) pairs onto a uniform grid.

    Each grid point t takes the last raw observation in (t - period, t].
    Negative and blank observations become missing rather than zero, so no
    spurious fill value can propagate.
    """
    if len(raw) == 0:
        raise ValueError("empty channel")
    times = np.asarray([t for t, _ in raw], dtype=np.float64)
    vals = np.asarray([v for _, v in raw], dtype=np.float64)
    if np.any(np.diff(times) < 0):
        raise ValueError("timestamps must be nondecreasing")
    n = int(times[-1] // period_s) + 1
    values = np.full(n, np.nan)
    idx = np.ceil(times / period_s - 1e-9).astype(np.int64)  # grid cell of each obs
    keep = idx < n
    values[idx[keep]] = vals[keep]  # later observations in a cell overwrite earlier
    values[values < 0] = np.nan
    mask = np.isnan(values)
    return ChannelSeries(name=name, values=values, missing_mask=mask)


def impute_missing(series: ChannelSeries) -> ChannelSeries:
    """Forward-fill then backward-fill; the result has no missing samples."""
    mask = series.missing_mask
    if mask.all():
        raise ValueError(f"unimputable channel {series.name}")
    if not mask.any():
        return ChannelSeries(series.name, series.values.copy(), np.zeros_like(mask))
    values = series.values.copy()
    idx = np.where(~mask, np.arange(values.size), -1)
    np.maximum.accumulate(idx, out=idx)
    filled = np.where(idx >= 0, values[np.maximum(idx, 0)], np.nan)
    still = np.isnan(filled)
    if still.any():  # leading gap: backward-fill from the first observation
        first = np.argmin(still)
        filled[:first] = filled[first]
    return ChannelSeries(series.name, filled, np.zeros_like(mask))


def volume_to_rate(series: ChannelSeries) -> ChannelSeries:
    """Cumulative infusion volume to a nonnegative rate per second.

    Pump resets (volume drops) clamp to zero instead of producing a negative
    rate.
    """
    if series.name not in VOLUME_CHANNELS:
        raise ValueError(f"{series.name} is not a volume channel")
    if series.missing_mask.any():
        raise ValueError("volume channel must be imputed before rate conversion")
    rate = np.empty_like(series.values)
    rate[0] = 0.0
    rate[1:] = np.maximum(0.0, np.diff(series.values) / SAMPLE_PERIOD_S)
    return ChannelSeries(series.name, rate, np.zeros_like(series.missing_mask))


def prepare_case(case: CaseRecord) -> CaseRecord:
    """Impute every channel and rate-convert the infusion volumes."""
    channels = []
    for ch in case.channels:
        ch = impute_missing(ch)
        if ch.name in VOLUME_CHANNELS:
            ch = volume_to_rate(ch)
        channels.append(ch)
    return CaseRecord(case_id=case.case_id, statics=case.statics,
                      channels=channels, duration_s=case.duration_s)


@dataclass(frozen=True)
class NormStats:
    """Per-channel standardization fit on the training split only.

    Static covariates use fixed clinical min-max ranges; sex and ASA pass
    through unchanged.
    """

    mean: np.ndarray  # (D,)
    std: np.ndarray   # (D,), floored

    def normalize_dynamic(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize_dynamic(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    @staticmethod
    def normalize_statics(statics) -> np.ndarray:
        out = np.empty(N_STATICS)
        for i, field in enumerate(STATIC_FIELDS):
            v = float(getattr(statics, field))
            if field in STATIC_MINMAX:
                lo, hi = STATIC_MINMAX[field]
                out[i] = (v - lo) / (hi - lo)
            else:
                out[i] = v
        return out

    def as_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


def fit_norm_stats(train_cases: list) -> NormStats:
    """Population mean/stddev per dynamic channel over all training samples."""
    if not train_cases:
        raise ValueError("training split is empty")
    total = np.zeros(N_CHANNELS)
    total_sq = np.zeros(N_CHANNELS)
    count = 0
    for case in train_cases:
        stacked = np.stack([c.values for c in case.channels])
        if np.isnan(stacked).any():
            raise ValueError(f"case {case.case_id} must be imputed before fitting stats")
        total += stacked.sum(axis=1)
        total_sq += (stacked ** 2).sum(axis=1)
        count += case.n_samples
    mean = total / count
    var = np.maximum(0.0, total_sq / count - mean ** 2)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return NormStats(mean=mean, std=std)


@dataclass
class WindowSample:
    """One model input: 30 s of normalized dynamics plus scaled statics."""

    x_d: np.ndarray  # (W, D)
    x_s: np.ndarray  # (S,)
    anchor_t: int
    case_id: str


def window_anchors(n_samples: int, lead_steps: int, stride_steps: int = 1,
                   event_window_steps: int = EVENT_STEPS) -> np.ndarray:
    """Admissible anchors: a full input window behind, a full horizon ahead."""
    last = n_samples - lead_steps - event_window_steps
    if last < WINDOW_STEPS:
        return np.empty(0, dtype=np.int64)
    return np.arange(WINDOW_STEPS, last + 1, stride_steps, dtype=np.int64)


def n_windows(n_samples: int, lead_steps: int, event_window_steps: int = EVENT_STEPS) -> int:
    """Window count at stride 1: max(0, n - W - lead - 30 + 1)."""
    return max(0, n_samples - WINDOW_STEPS - lead_steps - event_window_steps + 1)


def slice_windows(case: CaseRecord, stats: NormStats, lead_steps: int,
                  stride_s: float = SAMPLE_PERIOD_S,
                  event_window_steps: int = EVENT_STEPS) -> list:
    """Normalized WindowSamples for every admissible anchor of one case."""
    stride_steps = stride_s / SAMPLE_PERIOD_S
    if stride_steps != int(stride_steps) or stride_steps < 1:
        raise ValueError("stride_s must be a positive multiple of the 2 s period")
    stacked = np.stack([c.values for c in case.channels], axis=1)  # (n, D)
    if np.isnan(stacked).any():
        raise ValueError(f"case {case.case_id} has unimputed samples")
    normed = stats.normalize_dynamic(stacked)
    x_s = stats.normalize_statics(case.statics)
    anchors = window_anchors(case.n_samples, lead_steps, int(stride_steps), event_window_steps)
    return [
        WindowSample(x_d=normed[t - WINDOW_STEPS : t].copy(), x_s=x_s.copy(),
                     anchor_t=int(t), case_id=case.case_id)
        for t in anchors
    ]
