"""Transformer layer over the time axis with dual positional encoding.

Each node's window is encoded with learnable time-of-day and day-of-week
tables, projected to multi-head queries/keys/values, mixed by scaled
dot-product attention, and passed through a residual feed-forward stack.
No causal mask and no layer normalization anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

DAYS_PER_WEEK = 7


@dataclass
class PositionCodebook:
    """Additive learnable embeddings: one row per in-day slice, one per weekday."""

    tod_table: ad.Tensor  # (slices_per_day, feat)
    dow_table: ad.Tensor  # (7, feat)

    def named(self, prefix: str) -> dict[str, ad.Tensor]:
        return {f"{prefix}.tod_table": self.tod_table, f"{prefix}.dow_table": self.dow_table}


@dataclass
class AttentionParams:
    w_q: ad.Tensor
    w_k: ad.Tensor
    w_v: ad.Tensor
    ff_w0: ad.Tensor  # (feat, ff)
    ff_w1: ad.Tensor  # (ff, ff)
    ff_w2: ad.Tensor  # (ff, feat)
    heads: int

    def __post_init__(self):
        feat = self.w_q.shape[0]
        if feat % self.heads != 0:
            raise ConfigError(f"head count {self.heads} must divide feature width {feat}")

    def named(self, prefix: str) -> dict[str, ad.Tensor]:
        return {
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.ff_w0": self.ff_w0,
            f"{prefix}.ff_w1": self.ff_w1,
            f"{prefix}.ff_w2": self.ff_w2,
        }


def position_encode(
    x: ad.Tensor,
    time_index: np.ndarray,
    codebook: PositionCodebook,
    slices_per_day: int,
) -> ad.Tensor:
    """Add time-of-day and day-of-week rows for each step, broadcast over nodes.

    ``time_index`` holds absolute slice indices, shaped (T,) or (batch, T)
    when each sample carries its own window positions.
    """
    idx = np.asarray(time_index, dtype=np.int64)
    if np.any(idx < 0):
        raise ShapeError("time indices must be nonnegative")
    steps = x.shape[-2]
    if idx.shape[-1] != steps:
        raise ShapeError(f"{idx.shape[-1]} time indices for {steps} steps")
    enc = ad.add(
        ad.gather_rows(codebook.tod_table, idx % slices_per_day),
        ad.gather_rows(codebook.dow_table, (idx // slices_per_day) % DAYS_PER_WEEK),
    )
    if idx.ndim > 1:
        # per-sample encodings broadcast over the node axis
        feat = enc.shape[-1]
        enc = ad.reshape(enc, idx.shape[:-1] + (1, steps, feat))
    return ad.add(x, enc)


def split_heads(t: ad.Tensor, heads: int) -> ad.Tensor:
    steps, feat = t.shape[-2], t.shape[-1]
    if feat % heads != 0:
        raise ConfigError(f"head count {heads} must divide feature width {feat}")
    parts = ad.reshape(t, t.shape[:-1] + (heads, feat // heads))
    return ad.swapaxes(parts, -3, -2)  # (..., heads, steps, feat/heads)


def merge_heads(t: ad.Tensor) -> ad.Tensor:
    heads, head_feat = t.shape[-3], t.shape[-1]
    joined = ad.swapaxes(t, -3, -2)  # (..., steps, heads, feat/heads)
    return ad.reshape(joined, joined.shape[:-2] + (heads * head_feat,))


def qkv_project(
    x_enc: ad.Tensor, params: AttentionParams
) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Three linear projections, each split into heads along the feature axis."""
    q = split_heads(ad.matmul(x_enc, params.w_q), params.heads)
    k = split_heads(ad.matmul(x_enc, params.w_k), params.heads)
    v = split_heads(ad.matmul(x_enc, params.w_v), params.heads)
    return q, k, v


def attention_scores(q: ad.Tensor, k: ad.Tensor, d_scale: int) -> ad.Tensor:
    """softmax(Q·Kᵀ/√d_scale) over the key-time axis; rows sum to 1, no mask."""
    if q.shape != k.shape:
        raise ShapeError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    logits = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / sqrt(d_scale))
    return ad.softmax_lastdim(logits)


def temporal_forward(x_enc: ad.Tensor, params: AttentionParams, d_scale: int | None = None) -> ad.Tensor:
    """Attention with residual, then a two-hidden-layer relu stack with residual.

    With all parameters zero this is exactly the identity on its input.
    """
    feat = x_enc.shape[-1]
    if d_scale is None:
        d_scale = feat
    q, k, v = qkv_project(x_enc, params)
    scores = attention_scores(q, k, d_scale)
    mixed = ad.add(merge_heads(ad.matmul(scores, v)), x_enc)
    hidden = ad.relu(ad.matmul(ad.relu(ad.matmul(mixed, params.ff_w0)), params.ff_w1))
    return ad.add(ad.matmul(hidden, params.ff_w2), mixed)
