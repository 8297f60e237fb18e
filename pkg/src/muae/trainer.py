"""Patient-level splitting, the training loop, and ablation sweeps.

Training minimizes the reweighted co-occurrence objective with RAdam,
recomputing batch weights from each batch's labels; validation and testing
always score with plain BCE. Early stopping watches validation BCE and
restores the best checkpoint before the test evaluation.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import loss as loss_mod
from .labels import co_occurrence
from .metrics import EvalReport, evaluate, micro_scores
from .model import EarlyWarningNet, ModelConfig, load_checkpoint, save_checkpoint
from .shards import ShardBundle, WindowSet


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 10
    patience: int = 3
    split: tuple = (0.70, 0.10, 0.20)
    seed: int = 0
    lead_minutes: int = 5
    betas: tuple = (0.9, 0.999)
    threshold: float = 0.5

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f <= 0 for f in self.split):
            raise ValueError("split fractions must be positive and sum to 1")
        if self.lead_minutes not in (5, 10, 15):
            raise ValueError("lead_minutes must be one of 5, 10, 15")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, and patience must be >= 1")


def split_patients(cases: list, config: TrainConfig) -> tuple:
    """Deterministic case-level split; every case lands in exactly one set."""
    n = len(cases)
    if n < 3:
        raise ValueError("need at least 3 cases to split")
    order = np.random.default_rng(config.seed).permutation(n)
    n_train = int(round(config.split[0] * n))
    n_val = int(round(config.split[1] * n))
    n_train = max(1, min(n_train, n - 2))
    n_val = max(1, min(n_val, n - n_train - 1))
    train = [cases[i] for i in order[:n_train]]
    val = [cases[i] for i in order[n_train : n_train + n_val]]
    test = [cases[i] for i in order[n_train + n_val :]]
    return train, val, test


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)  # per-epoch train loss, val BCE, val micro F1
    best_epoch: int = 0
    stop_epoch: int = 0
    checkpoint_path: str = ""
    test_report: EvalReport | None = None

    def to_json(self) -> str:
        payload = {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "stop_epoch": self.stop_epoch,
            "checkpoint_path": self.checkpoint_path,
            "test_report": json.loads(self.test_report.to_json()) if self.test_report else None,
        }
        return json.dumps(payload, indent=2)


def _to_tensors(ws: WindowSet) -> tuple:
    return (
        torch.from_numpy(ws.x_d).float(),
        torch.from_numpy(ws.x_s).float(),
        torch.from_numpy(ws.y.astype(np.float32)),
    )


def predict_probs(model: EarlyWarningNet, ws: WindowSet, batch_size: int = 512) -> np.ndarray:
    """Deterministic inference probabilities for one window set."""
    x_d, x_s, _ = _to_tensors(ws)
    model.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, len(ws), batch_size):
            logits = model(x_d[i : i + batch_size], x_s[i : i + batch_size])
            chunks.append(torch.sigmoid(logits).numpy())
    return np.concatenate(chunks, axis=0)


def _validation_bce(model: EarlyWarningNet, ws: WindowSet, batch_size: int = 512) -> float:
    x_d, x_s, y = _to_tensors(ws)
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(ws), batch_size):
            logits = model(x_d[i : i + batch_size], x_s[i : i + batch_size])
            total += loss_mod.bce_mean(logits, y[i : i + batch_size]).item() * logits.shape[0]
    return total / len(ws)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, lcr_cfg: loss_mod.LcrConfig,
          bundle: ShardBundle, out_dir: Path) -> RunRecord:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    model = EarlyWarningNet(model_cfg)
    opt = torch.optim.RAdam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)

    x_d, x_s, y = _to_tensors(bundle.train)
    n = len(bundle.train)

    co = None
    if lcr_cfg.lam > 0 and lcr_cfg.co_source == "train_set":
        co = co_occurrence(bundle.train.y).m
    global_weights = None
    if lcr_cfg.weight_scope == "global":
        global_weights = loss_mod.batch_weights(bundle.train.y.astype(np.float64),
                                                lcr_cfg.scheme, lcr_cfg.weight_clip)

    shuffle_rng = torch.Generator().manual_seed(train_cfg.seed)
    record = RunRecord()
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    epochs_since_best = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=shuffle_rng)
        batch_losses = []
        for i in range(0, n, train_cfg.batch_size):
            idx = perm[i : i + train_cfg.batch_size]
            yb = y[idx]
            logits = model(x_d[idx], x_s[idx])
            if lcr_cfg.lam > 0 and lcr_cfg.co_source == "batch":
                co_b = co_occurrence(yb.numpy()).m
            else:
                co_b = co
            batch_loss = loss_mod.lcr_loss(logits, yb, co_b, lcr_cfg, weights=global_weights)
            if not torch.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss {batch_loss.item()} at epoch {epoch}, batch {i // train_cfg.batch_size}"
                )
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            batch_losses.append(batch_loss.item())

        val_bce = _validation_bce(model, bundle.val)
        val_probs = predict_probs(model, bundle.val)
        _, _, val_f1, _, _ = micro_scores(val_probs, bundle.val.y, train_cfg.threshold)
        record.epochs.append({
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            "val_bce": val_bce,
            "val_micro_f1": val_f1,
        })
        if val_bce < best_val:
            best_val = val_bce
            best_state = copy.deepcopy(model.state_dict())
            record.best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        record.stop_epoch = epoch
        if epochs_since_best >= train_cfg.patience:
            break

    model.load_state_dict(best_state)
    ckpt_path = out_dir / "checkpoint.bin"
    save_checkpoint(model, ckpt_path)
    record.checkpoint_path = str(ckpt_path)

    test_probs = predict_probs(model, bundle.test)
    record.test_report = evaluate(test_probs, bundle.test.y, train_cfg.threshold)
    return record


def evaluate_checkpoint(checkpoint_path: Path, ws: WindowSet, threshold: float = 0.5) -> EvalReport:
    model = load_checkpoint(checkpoint_path)
    probs = predict_probs(model, ws)
    return evaluate(probs, ws.y, threshold)


ABLATION_AXES = ("scheme", "batch_size", "lambda")


def ablate(axis: str, values: list, model_cfg: ModelConfig, train_cfg: TrainConfig,
           lcr_cfg: loss_mod.LcrConfig, bundle: ShardBundle, out_dir: Path) -> list:
    """One full train/eval per setting with fixed seeds; returns table rows.

    The batch_size axis varies the batch the co-occurrence matrix is
    estimated from (an integer batch size, or "all" for the whole training
    split); scheme and lambda vary the loss directly.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        m_cfg = copy.deepcopy(model_cfg)
        t_cfg = copy.deepcopy(train_cfg)
        l_cfg = copy.deepcopy(lcr_cfg)
        if axis == "scheme":
            l_cfg.scheme = value
        elif axis == "lambda":
            l_cfg.lam = float(value)
        else:
            if isinstance(value, str) and value.lower() == "all":
                l_cfg.co_source = "train_set"
            else:
                l_cfg.co_source = "batch"
                t_cfg.batch_size = int(value)
        l_cfg.__post_init__()
        t_cfg.__post_init__()
        record = train(m_cfg, t_cfg, l_cfg, bundle, out_dir / f"{axis}_{value}")
        rows.append({
            "axis": axis,
            "setting": str(value),
            "f1": record.test_report.micro_f1,
            "auc": record.test_report.macro_auc,
        })

    with (out_dir / "ablation.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "setting", "f1", "auc"])
        writer.writeheader()
        writer.writerows(rows)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows
