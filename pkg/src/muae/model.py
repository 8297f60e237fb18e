"""Early-warning classifier: static-conditioned feature modulation, one token
per variable, an encoder over variable tokens, and a 6-logit head.

Statics never enter as sequence features. A small condition network maps them
to per-step, per-channel scale and shift factors applied to the dynamic block
as (gamma + 1) * x + beta; with the gamma/beta head initialized to zero the
modulation starts as the exact identity. Each variable's whole 30 s series is
then embedded as a single token, so attention runs across variables and no
positional encoding is needed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schema import N_CHANNELS, N_EVENTS, N_STATICS, WINDOW_STEPS

CHECKPOINT_MAGIC = b"MUAC"


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ff_mult: int = 4
    dropout: float = 0.1
    n_classes: int = N_EVENTS
    w: int = WINDOW_STEPS
    d: int = N_CHANNELS
    s: int = N_STATICS
    static_tokens: bool = False
    cond_hidden: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_tokens(self) -> int:
        return self.d + (self.s if self.static_tokens else 0)


class ConditionNet(nn.Module):
    """Statics -> (gamma, beta), each (W, D). Zero-initialized output layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w, self.d = cfg.w, cfg.d
        self.fc1 = nn.Linear(cfg.s, cfg.cond_hidden)
        self.fc2 = nn.Linear(cfg.cond_hidden, 2 * cfg.w * cfg.d)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x_s):
        out = self.fc2(F.gelu(self.fc1(x_s)))
        gamma, beta = out.chunk(2, dim=-1)
        shape = (-1, self.w, self.d)
        return gamma.reshape(shape), beta.reshape(shape)


def tafilm(x_d: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """(gamma + 1) * x_d + beta, elementwise over (B, W, D)."""
    return (gamma + 1.0) * x_d + beta


class VariableTokenEmbedding(nn.Module):
    """One shared affine map from a variable's length-W series to a token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.w, cfg.d_model)
        self.static_proj = nn.Linear(1, cfg.d_model) if cfg.static_tokens else None

    def forward(self, x_fused, x_s=None):
        tokens = self.proj(x_fused.transpose(1, 2))  # (B, D, d_model)
        if self.static_proj is not None:
            static_tokens = self.static_proj(x_s.unsqueeze(-1))  # (B, S, d_model)
            tokens = torch.cat([tokens, static_tokens], dim=1)
        return tokens


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, return_attn: bool = False):
        b, n, dm = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, H, N, hd)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim ** 0.5, dim=-1)
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(b, n, dm)
        out = self.out(ctx)
        return (out, attn) if return_attn else (out, None)


class EncoderBlock(nn.Module):
    """Pre-norm: LN -> attention -> residual, LN -> feed-forward -> residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ff_mult * cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.ff_mult * cfg.d_model, cfg.d_model),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, return_attn: bool = False):
        attn_out, attn = self.attn(self.ln1(x), return_attn)
        x = x + self.drop(attn_out)
        x = x + self.drop(self.ff(self.ln2(x)))
        return x, attn


class EarlyWarningNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.cond = ConditionNet(cfg)
        self.embed = VariableTokenEmbedding(cfg)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Linear(cfg.n_tokens * cfg.d_model, cfg.n_classes)

    def fuse(self, x_d, x_s):
        gamma, beta = self.cond(x_s)
        return tafilm(x_d, gamma, beta)

    def encode(self, tokens, return_attn: bool = False):
        attns = []
        for block in self.blocks:
            tokens, attn = block(tokens, return_attn)
            if return_attn:
                attns.append(attn)
        return tokens, attns

    def forward(self, x_d, x_s, return_attn: bool = False):
        """Logits (B, n_classes); callers apply sigmoid for probabilities."""
        fused = self.fuse(x_d, x_s)
        tokens = self.embed(fused, x_s)
        encoded, attns = self.encode(tokens, return_attn)
        logits = self.head(encoded.reshape(encoded.shape[0], -1))
        return (logits, attns) if return_attn else logits


# ---------------------------------------------------------------------------
# Checkpoints: u32 header length, JSON header (config + named tensor shapes),
# then each tensor's row-major float32 data in header order.


def save_checkpoint(model: EarlyWarningNet, path: Path) -> None:
    state = model.state_dict()
    header = {
        "config": asdict(model.cfg),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        for k in state:
            fh.write(state[k].detach().cpu().to(torch.float32).numpy().tobytes())


def load_checkpoint(path: Path) -> EarlyWarningNet:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    header_len = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    model = EarlyWarningNet(cfg)
    offset = 8 + header_len
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += 4 * count
    model.load_state_dict(state)
    return model
