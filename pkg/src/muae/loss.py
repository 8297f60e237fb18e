"""Training objectives: frequency-reweighted BCE with a co-occurrence
regularizer, reference losses for comparison, and analytic gradient curves.

The reweighted term upweights each class by a function of its frequency in
the current batch: with positive fraction f, the schemes give

    none: 1    inverse: 1/f    sqrt_inverse: 1/sqrt(f)
    cubic_inverse: f^(-1/3)    log_inverse: ln(1 + 1/f)

and an empty class falls back to the clip value. The combined objective is
weighted_bce + lambda * co_loss. Validation and testing always use plain BCE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

SCHEMES = ("none", "inverse", "log_inverse", "sqrt_inverse", "cubic_inverse")
LAMBDA_GRID = (0.001, 0.01, 0.02, 0.05, 0.1, 0.2)


@dataclass
class LcrConfig:
    scheme: str = "sqrt_inverse"
    lam: float = 0.02
    weight_scope: str = "batch"      # or "global": frequencies from the whole training split
    co_source: str = "train_set"     # or "batch": co-occurrence recomputed per batch
    reg_space: str = "probability"   # or "logit"
    weight_clip: float = 100.0
    mean_over_batch: bool = False    # divide the weighted term by N as well as C

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if not 0.0 <= self.lam <= max(LAMBDA_GRID):
            raise ValueError(f"lambda must be in [0, {max(LAMBDA_GRID)}] (0 disables the regularizer)")
        if self.weight_scope not in ("batch", "global"):
            raise ValueError("weight_scope must be 'batch' or 'global'")
        if self.co_source not in ("train_set", "batch"):
            raise ValueError("co_source must be 'train_set' or 'batch'")
        if self.reg_space not in ("probability", "logit"):
            raise ValueError("reg_space must be 'probability' or 'logit'")
        if self.weight_clip <= 0:
            raise ValueError("weight_clip must be positive")


def scheme_weight(f, scheme: str, clip: float = 100.0):
    """Reweighting factor for a class with frequency f; f = 0 falls back to clip."""
    f = np.asarray(f, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        if scheme == "none":
            q = np.ones_like(f)
        elif scheme == "inverse":
            q = 1.0 / f
        elif scheme == "sqrt_inverse":
            q = 1.0 / np.sqrt(f)
        elif scheme == "cubic_inverse":
            q = f ** (-1.0 / 3.0)
        elif scheme == "log_inverse":
            q = np.log1p(1.0 / f)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    q = np.where(f <= 0, clip, q)
    return np.minimum(q, clip)


@dataclass
class BatchWeights:
    """Per-class positive/negative weights from one label matrix."""

    q_pos: torch.Tensor  # (C,)
    q_neg: torch.Tensor  # (C,)


def batch_weights(labels, scheme: str, clip: float = 100.0) -> BatchWeights:
    labels = torch.as_tensor(labels)
    if labels.ndim != 2 or labels.shape[0] < 1:
        raise ValueError("labels must be a nonempty N x C matrix")
    f_pos = labels.double().mean(dim=0).numpy()
    q_pos = torch.from_numpy(scheme_weight(f_pos, scheme, clip))
    q_neg = torch.from_numpy(scheme_weight(1.0 - f_pos, scheme, clip))
    return BatchWeights(q_pos=q_pos, q_neg=q_neg)


def _bce_elementwise(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    # y*softplus(-z) + (1-y)*softplus(z), stable at any logit
    labels = labels.to(logits.dtype)
    return labels * F.softplus(-logits) + (1.0 - labels) * F.softplus(logits)


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor, weights: BatchWeights,
                 mean_over_batch: bool = False) -> torch.Tensor:
    """Per-class weighted BCE, summed over the batch and averaged over classes."""
    labels = torch.as_tensor(labels, device=logits.device)
    bce = _bce_elementwise(logits, labels)
    pos = labels.to(logits.dtype)
    q_pos = weights.q_pos.to(logits.dtype)
    q_neg = weights.q_neg.to(logits.dtype)
    per_class = (q_pos * (bce * pos).sum(dim=0)) + (q_neg * (bce * (1.0 - pos)).sum(dim=0))
    loss = per_class.sum() / labels.shape[1]
    if mean_over_batch:
        loss = loss / labels.shape[0]
    return loss


def bce_mean(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Plain BCE over all label decisions; the validation/test loss."""
    labels = torch.as_tensor(labels, device=logits.device)
    return _bce_elementwise(logits, labels).mean()


def co_loss(predictions: torch.Tensor, co: torch.Tensor, reg_space: str = "probability") -> torch.Tensor:
    """Co-occurrence consistency: sum_ij co[i,j] * ||col_i - col_j||^2 / N.

    predictions are logits; columns are compared in probability space unless
    reg_space is "logit".
    """
    if reg_space not in ("probability", "logit"):
        raise ValueError("reg_space must be 'probability' or 'logit'")
    preds = torch.sigmoid(predictions) if reg_space == "probability" else predictions
    co = torch.as_tensor(co, dtype=preds.dtype, device=preds.device)
    gram = preds.T @ preds
    diag = gram.diagonal()
    sq_dists = diag[:, None] + diag[None, :] - 2.0 * gram
    return (co * sq_dists).sum() / preds.shape[0]


def lcr_loss(logits: torch.Tensor, labels, co, config: LcrConfig,
             weights: BatchWeights | None = None) -> torch.Tensor:
    """weighted_bce + lambda * co_loss. weights defaults to this batch's frequencies."""
    labels = torch.as_tensor(labels, device=logits.device)
    if weights is None:
        weights = batch_weights(labels, config.scheme, config.weight_clip)
    loss = weighted_bce(logits, labels, weights, config.mean_over_batch)
    if config.lam > 0:
        if co is None:
            raise ValueError("lambda > 0 requires a co-occurrence matrix")
        co_m = co.m if hasattr(co, "m") else co
        loss = loss + config.lam * co_loss(logits, np.asarray(co_m), config.reg_space)
    return loss


def reference_loss(kind: str, logits: torch.Tensor, labels, **params) -> torch.Tensor:
    """Standard comparison losses (batch mean): bce, wbce, focal, asl."""
    labels = torch.as_tensor(labels, device=logits.device).to(logits.dtype)
    if kind == "bce":
        return _bce_elementwise(logits, labels).mean()
    if kind == "wbce":
        pos_weight = params.get("pos_weight", 1.0)
        w = labels * float(pos_weight) + (1.0 - labels)
        return (w * _bce_elementwise(logits, labels)).mean()
    if kind == "focal":
        gamma = params.get("gamma", 2.0)
        alpha = params.get("alpha", None)
        p = torch.sigmoid(logits)
        pt = labels * p + (1.0 - labels) * (1.0 - p)
        loss = (1.0 - pt) ** gamma * _bce_elementwise(logits, labels)
        if alpha is not None:
            loss = (labels * alpha + (1.0 - labels) * (1.0 - alpha)) * loss
        return loss.mean()
    if kind == "asl":
        gamma_pos = params.get("gamma_pos", 0.0)
        gamma_neg = params.get("gamma_neg", 4.0)
        margin = params.get("margin", 0.05)
        p = torch.sigmoid(logits)
        p_m = torch.clamp(p - margin, min=0.0)
        loss_pos = labels * (1.0 - p) ** gamma_pos * F.softplus(-logits)
        loss_neg = (1.0 - labels) * p_m ** gamma_neg * (-torch.log1p(-p_m))
        return (loss_pos + loss_neg).mean()
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Analytic single-logit gradient curves


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gradient_curve(kind: str, target: int, z_grid, **params) -> np.ndarray:
    """Closed-form dL/dz over a logit grid for a single label decision.

    For "lcr" the curve is the weighted BCE term with the representative
    per-class weight implied by params f and scheme; the co-occurrence
    contribution is reported separately by co_gradient_probe.
    """
    if target not in (0, 1):
        raise ValueError("target must be 0 or 1")
    z = np.asarray(z_grid, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("z_grid must be finite")
    p = _sigmoid(z)
    y = float(target)

    if kind == "bce":
        return p - y
    if kind == "wbce":
        pos_weight = float(params.get("pos_weight", 1.0))
        return (pos_weight if target == 1 else 1.0) * (p - y)
    if kind == "focal":
        gamma = float(params.get("gamma", 2.0))
        # clip keeps log finite at saturated logits; the 0 * log factor vanishes there
        if target == 1:
            log_p = np.log(np.clip(p, 1e-300, 1.0))
            return gamma * p * (1.0 - p) ** gamma * log_p - (1.0 - p) ** (gamma + 1.0)
        log_q = np.log1p(-np.clip(p, 0.0, 1.0 - 1e-16))
        return -gamma * (1.0 - p) * p ** gamma * log_q + p ** (gamma + 1.0)
    if kind == "asl":
        gamma_pos = float(params.get("gamma_pos", 0.0))
        gamma_neg = float(params.get("gamma_neg", 4.0))
        margin = float(params.get("margin", 0.05))
        if target == 1:
            return gradient_curve("focal", 1, z, gamma=gamma_pos)
        p_m = np.maximum(np.minimum(p, 1.0 - 1e-16) - margin, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = (-gamma_neg * p_m ** (gamma_neg - 1.0) * np.log1p(-p_m)
                    + p_m ** gamma_neg / (1.0 - p_m))
        dldpm = np.where(p_m > 0.0, term, 0.0)  # flat region below the margin
        return dldpm * p * (1.0 - p)
    if kind == "lcr":
        scheme = params.get("scheme", "sqrt_inverse")
        f = float(params.get("f", 0.005))
        clip = float(params.get("weight_clip", 100.0))
        q = float(scheme_weight(f if target == 1 else 1.0 - f, scheme, clip))
        return q * (p - y)
    raise ValueError(f"unknown loss kind {kind!r}")


def co_gradient_probe(z_grid, lam: float = 0.02, co_offdiag: float = 0.5,
                      z_other: float = 0.0) -> np.ndarray:
    """d(lambda * co_loss)/dz for a single sample in a two-label probe.

    The other label's logit is held at z_other; both ordered pairs contribute,
    so L = lam * 2 co (p - p_other)^2 and dL/dz = lam * 4 co (p - p_other) p'.
    """
    z = np.asarray(z_grid, dtype=np.float64)
    p = _sigmoid(z)
    p_other = float(_sigmoid(np.asarray([z_other]))[0])
    return lam * 4.0 * co_offdiag * (p - p_other) * p * (1.0 - p)


def gradient_curve_csv(kind: str, target: int, z_grid, **params) -> str:
    """CSV lines `z,grad` for one configuration."""
    grads = gradient_curve(kind, target, z_grid, **params)
    lines = ["z,grad"]
    lines.extend(f"{float(z)!r},{float(g)!r}" for z, g in zip(np.asarray(z_grid, dtype=np.float64), grads))
    return "\n".join(lines) + "\n"
