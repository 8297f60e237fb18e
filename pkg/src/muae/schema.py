"""Fixed registries shared by every stage of the pipeline.

Channel names, the six adverse events with their trigger channels and
thresholds, and the window geometry are frozen here so that cohort files,
window shards, label vectors, and the co-occurrence matrix all agree on
ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

SAMPLE_PERIOD_S = 2.0

# Input window: 30 s of 2 s samples.
WINDOW_STEPS = 15

# Event condition window: 1 minute of 2 s samples.
EVENT_STEPS = 30

# Dynamic channels, in the canonical column order used by the case CSVs
# and the window shards.
CHANNELS = (
    "PPF20_VOL",
    "RFTN20_VOL",
    "PPF20_CE",
    "RFTN20_CE",
    "HR",
    "BT",
    "ART_DBP",
    "ART_SBP",
    "ART_MBP",
    "ETCO2",
    "PLETH_SPO2",
    "VENT_TV",
    "VENT_RR",
    "BIS",
    "ECG_II",
)
N_CHANNELS = len(CHANNELS)
CHANNEL_INDEX = {name: i for i, name in enumerate(CHANNELS)}

# Cumulative infusion volumes; converted to rates during preprocessing.
VOLUME_CHANNELS = ("PPF20_VOL", "RFTN20_VOL")

# Static covariates, in vector order.
STATIC_FIELDS = ("age", "sex", "weight", "height", "asa")
N_STATICS = len(STATIC_FIELDS)

# Fixed ranges used to scale static covariates into [0, 1]; sex and ASA
# class pass through as raw codes.
STATIC_MINMAX = {"age": (18.0, 100.0), "weight": (35.0, 150.0), "height": (120.0, 210.0)}


@dataclass(frozen=True)
class EventDef:
    """One adverse-event trigger: a sustained threshold excursion.

    ``direction`` is "below" when the condition is max(segment) < threshold
    and "above" when it is min(segment) > threshold.
    """

    name: str
    channel: str
    threshold: float
    direction: str


# Frozen event order; label vectors and the co-occurrence matrix index by it.
# Arrhythmia is triggered by either HR bound.
EVENTS = (
    EventDef("hypotension", "ART_MBP", 65.0, "below"),
    EventDef("low_doa", "BIS", 40.0, "below"),
    EventDef("arrhythmia", "HR", 60.0, "below"),  # paired with the >100 bound below
    EventDef("hypoxemia", "PLETH_SPO2", 90.0, "below"),
    EventDef("hypothermia", "BT", 35.0, "below"),
    EventDef("hypocapnia", "ETCO2", 30.0, "below"),
)
N_EVENTS = len(EVENTS)
EVENT_NAMES = tuple(e.name for e in EVENTS)
EVENT_INDEX = {e.name: i for i, e in enumerate(EVENTS)}

ARRHYTHMIA_HIGH_THRESHOLD = 100.0

# Lead times supported by the prediction task.
LEAD_MINUTES = (5, 10, 15)


def lead_steps(lead_minutes: int) -> int:
    """Convert a lead time in minutes to 2 s sample steps (5/10/15 -> 150/300/450)."""
    if lead_minutes not in LEAD_MINUTES:
        raise ValueError(f"lead_minutes must be one of {LEAD_MINUTES}, got {lead_minutes}")
    return int(lead_minutes * 60 / SAMPLE_PERIOD_S)
