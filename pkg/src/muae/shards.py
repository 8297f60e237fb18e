"""Binary window shards and their index JSON.

A shard file is the magic bytes "MUAE", a little-endian u32 format version,
then one fixed-size record per window: the W x D float32 input block, the
S float32 statics, six label bytes, and the u64 anchor index. Everything
variable (counts, shapes, per-case grouping, split assignment, the fitted
normalization) lives in index.json next to the shards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import labels as labels_mod
from .preprocess import NormStats, fit_norm_stats, prepare_case, slice_windows, window_anchors
from .schema import (
    EVENT_STEPS,
    N_CHANNELS,
    N_EVENTS,
    N_STATICS,
    SAMPLE_PERIOD_S,
    WINDOW_STEPS,
)

MAGIC = b"MUAE"
VERSION = 1

RECORD_DTYPE = np.dtype([
    ("x_d", "<f4", (WINDOW_STEPS, N_CHANNELS)),
    ("x_s", "<f4", (N_STATICS,)),
    ("y", "u1", (N_EVENTS,)),
    ("anchor", "<u8"),
])


@dataclass
class WindowSet:
    """In-memory view of one split's windows."""

    x_d: np.ndarray      # (N, W, D) float32
    x_s: np.ndarray      # (N, S) float32
    y: np.ndarray        # (N, C) uint8
    anchors: np.ndarray  # (N,) uint64
    case_ids: list       # per window

    def __len__(self) -> int:
        return self.x_d.shape[0]


def write_shard(path: Path, window_set: WindowSet) -> None:
    n = len(window_set)
    records = np.empty(n, dtype=RECORD_DTYPE)
    records["x_d"] = window_set.x_d
    records["x_s"] = window_set.x_s
    records["y"] = window_set.y
    records["anchor"] = window_set.anchors
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(records.tobytes())


def read_shard(path: Path, groups: list) -> WindowSet:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a window shard (bad magic)")
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    if version != VERSION:
        raise ValueError(f"unsupported shard version {version}")
    records = np.frombuffer(blob, dtype=RECORD_DTYPE, offset=8)
    case_ids = []
    for g in groups:
        case_ids.extend([g["case_id"]] * g["count"])
    if len(case_ids) != records.size:
        raise ValueError("index groups do not cover the shard")
    return WindowSet(
        x_d=records["x_d"].copy(),
        x_s=records["x_s"].copy(),
        y=records["y"].copy(),
        anchors=records["anchor"].copy(),
        case_ids=case_ids,
    )


@dataclass
class ShardBundle:
    """The three split WindowSets plus the metadata needed to reuse them."""

    splits: dict          # split name -> WindowSet
    norm_stats: NormStats
    lead_steps: int
    index: dict

    @property
    def train(self) -> WindowSet:
        return self.splits["train"]

    @property
    def val(self) -> WindowSet:
        return self.splits["val"]

    @property
    def test(self) -> WindowSet:
        return self.splits["test"]


def prepare_shards(
    split_cases: dict,
    out_dir: Path,
    lead_steps: int,
    stride_steps: int = 1,
    event_window_steps: int = EVENT_STEPS,
) -> ShardBundle:
    """Impute, rate-convert, window, label, and shard a split cohort.

    split_cases maps split name -> list of raw CaseRecords. Normalization is
    fit on the training split and applied to all three.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prepared = {name: [prepare_case(c) for c in cases] for name, cases in split_cases.items()}
    stats = fit_norm_stats(prepared["train"])

    index = {
        "version": VERSION,
        "shapes": {"w": WINDOW_STEPS, "d": N_CHANNELS, "s": N_STATICS, "n_classes": N_EVENTS},
        "lead_steps": lead_steps,
        "stride_steps": stride_steps,
        "event_window_steps": event_window_steps,
        "norm_stats": stats.as_dict(),
        "splits": {},
    }
    splits = {}
    for name, cases in prepared.items():
        xs_d, xs_s, ys, anchors, case_ids, groups = [], [], [], [], [], []
        start = 0
        for case in cases:
            samples = slice_windows(case, stats, lead_steps,
                                    stride_s=stride_steps * SAMPLE_PERIOD_S,
                                    event_window_steps=event_window_steps)
            a = window_anchors(case.n_samples, lead_steps, stride_steps, event_window_steps)
            y = labels_mod.label_case_windows(case, a, lead_steps, event_window_steps)
            for s, row in zip(samples, y):
                xs_d.append(s.x_d)
                xs_s.append(s.x_s)
                ys.append(row)
                anchors.append(s.anchor_t)
                case_ids.append(s.case_id)
            groups.append({"case_id": case.case_id, "start": start, "count": len(samples)})
            start += len(samples)
        window_set = WindowSet(
            x_d=np.asarray(xs_d, dtype=np.float32).reshape(start, WINDOW_STEPS, N_CHANNELS),
            x_s=np.asarray(xs_s, dtype=np.float32).reshape(start, N_STATICS),
            y=np.asarray(ys, dtype=np.uint8).reshape(start, N_EVENTS),
            anchors=np.asarray(anchors, dtype=np.uint64),
            case_ids=case_ids,
        )
        write_shard(out_dir / f"{name}.muae", window_set)
        index["splits"][name] = {
            "file": f"{name}.muae",
            "n_windows": start,
            "groups": groups,
        }
        splits[name] = window_set

    (out_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return ShardBundle(splits=splits, norm_stats=stats, lead_steps=lead_steps, index=index)


def load_shards(shard_dir: Path) -> ShardBundle:
    shard_dir = Path(shard_dir)
    index = json.loads((shard_dir / "index.json").read_text())
    splits = {}
    for name, entry in index["splits"].items():
        splits[name] = read_shard(shard_dir / entry["file"], entry["groups"])
        if len(splits[name]) != entry["n_windows"]:
            raise ValueError(f"window count mismatch in split {name}")
    return ShardBundle(
        splits=splits,
        norm_stats=NormStats.from_dict(index["norm_stats"]),
        lead_steps=index["lead_steps"],
        index=index,
    )
