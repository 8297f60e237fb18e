"""Deterministic synthetic perioperative cohorts with injectable adverse episodes.

A stand-in source producing the same CSV + JSON contract real exports use.
Each channel is a mean-reverting random walk clipped to a band that stays on
the safe side of its event threshold, so a zero-rate cohort can never label
positive. Adverse episodes are spliced in as a slow drift toward the
threshold (long enough to be visible at the longest lead time), a 60 s ramp
across it, a jittered hold past it, and a ramp back. The hold keeps every
sample past the threshold, so the sustained one-minute condition is
controllable by construction.

Everything is a pure function of (seed, case_index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .schema import (
    ARRHYTHMIA_HIGH_THRESHOLD,
    CHANNELS,
    CHANNEL_INDEX,
    EVENT_INDEX,
    EVENT_NAMES,
    EVENT_STEPS,
    EVENTS,
    SAMPLE_PERIOD_S,
    STATIC_FIELDS,
    WINDOW_STEPS,
    lead_steps,
)

# Observed per-event occurrence band for positive windows; nonzero targets
# outside it require an explicit override.
RATE_BAND = (0.00189, 0.02531)
RATE_CAP = 0.05

RAMP_STEPS = 30  # 60 s threshold crossing
RECOVERY_STEPS = 120
PRODROME_MARGIN_STEPS = 45

DEFAULT_EVENT_RATES = {
    "hypotension": 0.022,
    "low_doa": 0.012,
    "arrhythmia": 0.018,
    "hypoxemia": 0.005,
    "hypothermia": 0.008,
    "hypocapnia": 0.004,
}

DEFAULT_MISSING_RATES = {
    "PPF20_VOL": 0.05,
    "RFTN20_VOL": 0.05,
    "PPF20_CE": 0.20,
    "RFTN20_CE": 0.20,
    "HR": 0.02,
    "BT": 0.10,
    "ART_DBP": 0.03,
    "ART_SBP": 0.03,
    "ART_MBP": 0.03,
    "ETCO2": 0.08,
    "PLETH_SPO2": 0.05,
    "VENT_TV": 0.08,
    "VENT_RR": 0.08,
    "BIS": 0.12,
    "ECG_II": 0.15,
}

# Baseline model per channel: mean range across patients, step noise, mean
# reversion, and a clip band that never touches an event threshold. The clip
# floors also stay outside the episode approach corridor, so a drifting
# episode is distinguishable from a low-wandering baseline.
_BASELINES = {
    "PPF20_CE": (2.0, 4.0, 0.05, 0.05, 0.5, 6.0),
    "RFTN20_CE": (2.0, 5.0, 0.06, 0.05, 0.5, 8.0),
    "HR": (70.0, 88.0, 1.2, 0.05, 66.0, 94.0),
    "BT": (36.0, 37.2, 0.03, 0.03, 35.55, 37.8),
    "ART_DBP": (55.0, 75.0, 1.2, 0.05, 42.0, 95.0),
    "ART_SBP": (100.0, 140.0, 1.8, 0.05, 88.0, 180.0),
    "ART_MBP": (78.0, 100.0, 1.2, 0.05, 71.0, 112.0),
    "ETCO2": (33.5, 42.0, 0.5, 0.05, 32.5, 45.0),
    "PLETH_SPO2": (96.0, 99.0, 0.3, 0.05, 94.5, 100.0),
    "VENT_TV": (400.0, 550.0, 5.0, 0.05, 300.0, 700.0),
    "VENT_RR": (10.0, 14.0, 0.15, 0.05, 8.0, 18.0),
    "BIS": (46.0, 58.0, 0.8, 0.05, 44.0, 68.0),
    "ECG_II": (-0.05, 0.05, 0.02, 0.10, -1.0, 1.0),
}

# Episode shape per event kind: approach level (safe side of the threshold,
# reached by the prodrome drift), hold level (past the threshold), and the
# hold jitter bound. Arrhythmia has a bradycardic and a tachycardic variant.
_EPISODES = {
    "hypotension": ("ART_MBP", 65.0, "below", 68.0, 57.0, 2.0),
    "low_doa": ("BIS", 40.0, "below", 42.5, 33.0, 2.0),
    "arrhythmia_brady": ("HR", 60.0, "below", 63.0, 50.0, 2.0),
    "arrhythmia_tachy": ("HR", ARRHYTHMIA_HIGH_THRESHOLD, "above", 97.0, 112.0, 2.0),
    "hypoxemia": ("PLETH_SPO2", 90.0, "below", 92.5, 85.0, 1.5),
    "hypothermia": ("BT", 35.0, "below", 35.3, 34.3, 0.3),
    "hypocapnia": ("ETCO2", 30.0, "below", 31.5, 26.0, 1.5),
}


@dataclass(frozen=True)
class StaticCovariates:
    age: int
    sex: int
    weight: float
    height: float
    asa: int

    def __post_init__(self):
        if self.age < 18:
            raise ValueError("age must be >= 18")
        if self.sex not in (0, 1):
            raise ValueError("sex must be 0 or 1")
        if self.weight <= 35:
            raise ValueError("weight must be > 35 kg")
        if self.height <= 0:
            raise ValueError("height must be positive")
        if self.asa not in (1, 2, 3, 4, 5):
            raise ValueError("asa must be in 1..5")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in STATIC_FIELDS}


@dataclass
class ChannelSeries:
    """One resampled channel; masked positions hold NaN and must not be read."""

    name: str
    values: np.ndarray
    missing_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.name not in CHANNEL_INDEX:
            raise ValueError(f"unknown channel {self.name!r}")
        if self.values.shape != self.missing_mask.shape or self.values.ndim != 1:
            raise ValueError("values and missing_mask must be equal-length vectors")
        if not np.all(np.isfinite(self.values[~self.missing_mask])):
            raise ValueError("non-missing values must be finite")

    def __len__(self) -> int:
        return self.values.size


@dataclass
class CaseRecord:
    case_id: str
    statics: StaticCovariates
    channels: list
    duration_s: float

    def __post_init__(self):
        if len(self.channels) != len(CHANNELS):
            raise ValueError(f"expected {len(CHANNELS)} channels, got {len(self.channels)}")
        names = [c.name for c in self.channels]
        if names != list(CHANNELS):
            raise ValueError("channels must appear in canonical order")
        lengths = {len(c) for c in self.channels}
        if len(lengths) != 1:
            raise ValueError("all channels must share one sample count")
        if self.duration_s < 7200:
            raise ValueError("duration_s must be >= 7200 (2 h inclusion criterion)")

    @property
    def n_samples(self) -> int:
        return len(self.channels[0])

    def channel(self, name: str) -> ChannelSeries:
        return self.channels[CHANNEL_INDEX[name]]


@dataclass
class SynthConfig:
    n_cases: int
    seed: int
    event_rates: dict = field(default_factory=lambda: dict(DEFAULT_EVENT_RATES))
    missing_rates: dict = field(default_factory=lambda: dict(DEFAULT_MISSING_RATES))
    horizon_minutes: int = 5
    duration_range_s: tuple = (7200, 10800)
    # short holds keep per-episode window counts small, so rare events get
    # enough episodes for their cohort rate to concentrate
    hold_range_s: tuple = (120, 170)
    pair_correlation: float = 0.3
    allow_rate_override: bool = False

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if self.horizon_minutes not in (5, 10, 15):
            raise ValueError("horizon_minutes must be one of 5, 10, 15")
        for name, rate in self.event_rates.items():
            if name not in EVENT_INDEX:
                raise ValueError(f"unknown event {name!r} in event_rates")
            if not 0.0 <= rate <= RATE_CAP:
                raise ValueError(f"event rate for {name} must be in [0, {RATE_CAP}]")
            if rate > 0 and not self.allow_rate_override:
                if not RATE_BAND[0] <= rate <= RATE_BAND[1]:
                    raise ValueError(
                        f"event rate {rate} for {name} outside the observed band "
                        f"{RATE_BAND}; set allow_rate_override to force it"
                    )
        for name, rate in self.missing_rates.items():
            if name not in CHANNEL_INDEX:
                raise ValueError(f"unknown channel {name!r} in missing_rates")
            if not 0.0 <= rate <= 0.25:
                raise ValueError(f"missing rate for {name} must be in [0, 0.25]")
        lo, hi = self.duration_range_s
        if lo < 7200 or hi < lo:
            raise ValueError("duration_range_s must satisfy 7200 <= lo <= hi")
        lo, hi = self.hold_range_s
        if lo < 60 or hi < lo:
            raise ValueError("hold_range_s must satisfy 60 <= lo <= hi")
        if not 0.0 <= self.pair_correlation <= 1.0:
            raise ValueError("pair_correlation must be in [0, 1]")


@dataclass(frozen=True)
class Episode:
    """Bookkeeping for one injected excursion (hold interval in samples)."""

    kind: str
    channel: str
    hold_start: int
    hold_len: int


def _ramp_values(start: float, stop: float) -> np.ndarray:
    frac = np.arange(1, RAMP_STEPS + 1, dtype=np.float64) / RAMP_STEPS
    return start + (stop - start) * frac


def _past_threshold(values: np.ndarray, threshold: float, direction: str) -> np.ndarray:
    return values < threshold if direction == "below" else values > threshold


def _ramp_past_count(kind: str) -> int:
    """Samples of one 60 s ramp that already sit past the threshold."""
    _, thr, direction, approach, level, _ = _EPISODES[kind]
    return int(_past_threshold(_ramp_values(approach, level), thr, direction).sum())


def positives_per_episode(kind: str, hold_len: int) -> int:
    """Positive window anchors one episode contributes at any lead time.

    The sub-threshold run is the hold plus the past-threshold tail of each
    ramp; every 30-sample event segment inside the run is positive.
    """
    run = hold_len + 2 * _ramp_past_count(kind)
    return max(0, run - (EVENT_STEPS - 1))


def _prodrome_steps(lead: int) -> int:
    # Long enough that every positive anchor's input window sits inside the
    # drift, making the upcoming excursion visible to the model.
    return lead + WINDOW_STEPS + PRODROME_MARGIN_STEPS


def _inject(signal: np.ndarray, ep: Episode, rng: np.random.Generator, lead: int) -> None:
    _, _, _, approach, level, jitter = _EPISODES[ep.kind]
    p = _prodrome_steps(lead)
    pro0 = ep.hold_start - RAMP_STEPS - p
    w = np.arange(1, p + 1, dtype=np.float64) / p
    signal[pro0 : pro0 + p] = signal[pro0 : pro0 + p] * (1 - w) + approach * w
    signal[pro0 + p : ep.hold_start] = _ramp_values(approach, level)
    hold = level + np.clip(rng.normal(0.0, jitter / 2, ep.hold_len), -jitter, jitter)
    signal[ep.hold_start : ep.hold_start + ep.hold_len] = hold
    out0 = ep.hold_start + ep.hold_len
    signal[out0 : out0 + RAMP_STEPS] = _ramp_values(level, approach)
    rec = np.arange(1, RECOVERY_STEPS + 1, dtype=np.float64) / RECOVERY_STEPS
    seg = signal[out0 + RAMP_STEPS : out0 + RAMP_STEPS + RECOVERY_STEPS]
    seg[:] = approach * (1 - rec[: seg.size]) + seg * rec[: seg.size]


def _episode_span(hold_start: int, hold_len: int, lead: int) -> tuple:
    p = _prodrome_steps(lead)
    return (hold_start - RAMP_STEPS - p, hold_start + hold_len + RAMP_STEPS + RECOVERY_STEPS)


def _place_episodes(
    n: int, lead: int, wanted: list, occupied: dict, rng: np.random.Generator
) -> list:
    """Drop episodes at random non-overlapping positions; skip what cannot fit."""
    placed = []
    gap = 60
    for kind, channel, hold_len in wanted:
        footprint = _prodrome_steps(lead) + RAMP_STEPS + hold_len + RAMP_STEPS + RECOVERY_STEPS
        lo = _prodrome_steps(lead) + RAMP_STEPS
        hi = n - hold_len - RAMP_STEPS - RECOVERY_STEPS
        if hi <= lo:
            continue
        taken = occupied.setdefault(channel, [])
        for _ in range(100):
            hold_start = int(rng.integers(lo, hi))
            span = _episode_span(hold_start, hold_len, lead)
            if all(span[1] + gap <= s or e + gap <= span[0] for s, e in taken):
                taken.append(span)
                placed.append(Episode(kind, channel, hold_start, hold_len))
                break
    return placed


def _schedule_case_episodes(config: SynthConfig, n: int, rng: np.random.Generator) -> list:
    """Decide which episodes this case gets, honoring the target window rates."""
    lead = lead_steps(config.horizon_minutes)
    n_anchors = n - lead - EVENT_STEPS - WINDOW_STEPS + 1
    if n_anchors <= 0:
        return []
    hold_lo = int(round(config.hold_range_s[0] / SAMPLE_PERIOD_S))
    hold_hi = int(round(config.hold_range_s[1] / SAMPLE_PERIOD_S))

    def draw_hold() -> int:
        return int(rng.integers(hold_lo, hold_hi + 1))

    def episode_budget(kind: str, rate: float) -> int:
        if rate <= 0:
            return 0
        mean_hold = (hold_lo + hold_hi) / 2
        per_ep = max(1.0, mean_hold + 2 * _ramp_past_count(kind) - (EVENT_STEPS - 1))
        want = rate * n_anchors / per_ep
        count = int(want)
        if rng.random() < want - count:
            count += 1
        return count

    occupied: dict = {}
    placed: list = []

    # Hypotension first so arrhythmia episodes can correlate with it.
    rate = config.event_rates.get("hypotension", 0.0)
    hypo_wanted = [("hypotension", "ART_MBP", draw_hold()) for _ in range(episode_budget("hypotension", rate))]
    hypo_placed = _place_episodes(n, lead, hypo_wanted, occupied, rng)
    placed.extend(hypo_placed)

    arr_rate = config.event_rates.get("arrhythmia", 0.0)
    arr_budget = episode_budget("arrhythmia_brady", arr_rate)
    paired = 0
    if arr_rate > 0:
        for ep in hypo_placed:
            if paired >= arr_budget:
                break
            if rng.random() < config.pair_correlation:
                span = _episode_span(ep.hold_start, ep.hold_len, lead)
                taken = occupied.setdefault("HR", [])
                if all(span[1] + 60 <= s or e + 60 <= span[0] for s, e in taken):
                    taken.append(span)
                    placed.append(Episode("arrhythmia_brady", "HR", ep.hold_start, ep.hold_len))
                    paired += 1
    arr_wanted = []
    for _ in range(max(0, arr_budget - paired)):
        kind = "arrhythmia_brady" if rng.random() < 0.5 else "arrhythmia_tachy"
        arr_wanted.append((kind, "HR", draw_hold()))
    placed.extend(_place_episodes(n, lead, arr_wanted, occupied, rng))

    for name in ("low_doa", "hypoxemia", "hypothermia", "hypocapnia"):
        rate = config.event_rates.get(name, 0.0)
        channel = _EPISODES[name][0]
        wanted = [(name, channel, draw_hold()) for _ in range(episode_budget(name, rate))]
        placed.extend(_place_episodes(n, lead, wanted, occupied, rng))
    return placed


def _ou_series(n: int, mu: float, sigma: float, theta: float, lo: float, hi: float,
               rng: np.random.Generator) -> np.ndarray:
    # x[t] - mu follows y[t] = (1-theta) y[t-1] + noise, an IIR filter; the
    # clip to the safe band is applied to the finished series.
    steps = rng.normal(0.0, sigma, n)
    steps[0] = steps[0] / math.sqrt(2 * theta)  # start near the stationary spread
    y = lfilter([1.0], [1.0, -(1.0 - theta)], steps)
    return np.clip(mu + y, lo, hi)


def _volume_series(n: int, rng: np.random.Generator) -> np.ndarray:
    """Nondecreasing cumulative volume from a smoothly varying pump rate."""
    rate = _ou_series(n, mu=float(rng.uniform(10.0, 30.0)), sigma=0.5, theta=0.05,
                      lo=0.0, hi=60.0, rng=rng)
    if rng.random() < 0.5:  # occasional pump pause
        p0 = int(rng.integers(0, max(1, n - 300)))
        rate[p0 : p0 + 300] = 0.0
    return np.cumsum(rate / 1800.0)  # mL/h over one 2 s step


def generate_case_with_episodes(config: SynthConfig, case_index: int) -> tuple:
    """generate_case plus the injected-episode bookkeeping, for verification."""
    if case_index >= config.n_cases or case_index < 0:
        raise ValueError("case_index must be < n_cases")
    rng = np.random.default_rng([config.seed & 0xFFFFFFFFFFFFFFFF, case_index])

    age = int(rng.integers(18, 91))
    sex = int(rng.integers(0, 2))
    weight = float(np.round(rng.uniform(40.0, 120.0), 1))
    height = float(np.round(rng.uniform(145.0, 195.0), 1))
    asa = int(rng.choice([1, 2, 3, 4, 5], p=[0.20, 0.68, 0.10, 0.015, 0.005]))
    statics = StaticCovariates(age=age, sex=sex, weight=weight, height=height, asa=asa)

    lo_s, hi_s = config.duration_range_s
    n = int(rng.integers(int(lo_s / SAMPLE_PERIOD_S), int(hi_s / SAMPLE_PERIOD_S) + 1))
    duration_s = n * SAMPLE_PERIOD_S

    signals = {}
    for name in CHANNELS:
        if name in ("PPF20_VOL", "RFTN20_VOL"):
            signals[name] = _volume_series(n, rng)
        else:
            mu_lo, mu_hi, sigma, theta, lo, hi = _BASELINES[name]
            mu = float(rng.uniform(mu_lo, mu_hi))
            signals[name] = _ou_series(n, mu, sigma, theta, lo, hi, rng)

    episodes = _schedule_case_episodes(config, n, rng)
    lead = lead_steps(config.horizon_minutes)
    for ep in episodes:
        _inject(signals[ep.channel], ep, rng, lead)

    channels = []
    for name in CHANNELS:
        values = signals[name]
        mask = np.zeros(n, dtype=bool)
        p = config.missing_rates.get(name, 0.0)
        k = int(round(p * n))
        if k > 0:
            mask[rng.choice(n, size=k, replace=False)] = True
            values = values.copy()
            values[mask] = np.nan
        channels.append(ChannelSeries(name=name, values=values, missing_mask=mask))

    case = CaseRecord(case_id=f"case{case_index:05d}", statics=statics,
                      channels=channels, duration_s=duration_s)
    return case, episodes


def generate_case(config: SynthConfig, case_index: int) -> CaseRecord:
    """One synthetic surgical case, fully determined by (config.seed, case_index)."""
    return generate_case_with_episodes(config, case_index)[0]


def generate_cohort(config: SynthConfig) -> list:
    """All n_cases cases; independent streams, safe to generate in any order."""
    return [generate_case(config, i) for i in range(config.n_cases)]


# ---------------------------------------------------------------------------
# CSV + JSON cohort contract (also the ingestion format for real exports)


def _format_cell(v: float) -> str:
    # repr of a python float is the shortest string that round-trips exactly
    return "" if math.isnan(v) else repr(float(v))


def write_case_csv(case: CaseRecord, path: Path) -> None:
    lines = ["t_s," + ",".join(CHANNELS)]
    cols = [c.values for c in case.channels]
    for t in range(case.n_samples):
        row = [str(int(t * SAMPLE_PERIOD_S))]
        row.extend(_format_cell(col[t]) for col in cols)
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_case_csv(path: Path, case_id: str, statics: StaticCovariates) -> CaseRecord:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if header != ["t_s"] + list(CHANNELS):
        raise ValueError(f"unexpected CSV header in {path}")
    table = np.genfromtxt(path, delimiter=",", skip_header=1, missing_values="",
                          filling_values=np.nan)
    table = np.atleast_2d(table)
    values = table[:, 1:].T  # drop t_s, channels as rows
    channels = [
        ChannelSeries(name=name, values=values[j], missing_mask=np.isnan(values[j]))
        for j, name in enumerate(CHANNELS)
    ]
    n = values.shape[1]
    return CaseRecord(case_id=case_id, statics=statics, channels=channels,
                      duration_s=n * SAMPLE_PERIOD_S)


def write_cohort(cases: list, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for case in cases:
        write_case_csv(case, out_dir / f"{case.case_id}.csv")
        manifest.append({
            "case_id": case.case_id,
            "statics": case.statics.as_dict(),
            "n_samples": case.n_samples,
        })
    manifest_path = out_dir / "cohort.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def read_cohort(cohort_dir: Path) -> list:
    cohort_dir = Path(cohort_dir)
    manifest = json.loads((cohort_dir / "cohort.json").read_text())
    cases = []
    for entry in manifest:
        statics = StaticCovariates(**entry["statics"])
        case = read_case_csv(cohort_dir / f"{entry['case_id']}.csv", entry["case_id"], statics)
        if case.n_samples != entry["n_samples"]:
            raise ValueError(f"sample count mismatch for {entry['case_id']}")
        cases.append(case)
    return cases
