"""Multi-head self/cross attention along the joint or frame axis.

Feature tensors have shape ``(..., T, J, C)``. Spatial attention mixes the J
joints of each frame independently; temporal attention mixes the T frames of
each joint independently.

Every call also returns the per-head post-softmax attention matrix averaged
over the independent axis (frames for spatial, joints for temporal), shape
``(..., H, L, L)``. Any leading sequence-batch axes are kept so that one
sequence never influences another.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .layers import uniform_fan_in
from .tensor_core import DimensionError, Rng, matmul, softmax

SPATIAL = "spatial"
TEMPORAL = "temporal"
AXES = (SPATIAL, TEMPORAL)


def to_tokens(x: torch.Tensor, axis: str) -> torch.Tensor:
    """Move the attended axis to position -2: (..., A, L, C)."""
    if axis == SPATIAL:
        return x
    if axis == TEMPORAL:
        return x.transpose(-2, -3)
    raise ValueError(f"axis must be one of {AXES}, got {axis!r}")


from_tokens = to_tokens  # the swap is its own inverse


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, length, c = x.shape
    return x.reshape(*lead, length, heads, c // heads).transpose(-2, -3)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, heads, length, d = x.shape
    return x.transpose(-2, -3).reshape(*lead, length, heads * d)


class MhaParams(nn.Module):
    """Projection weights ``W_Q, W_K, W_V, W_O`` (each C x C) for H heads."""

    def __init__(self, rng: Rng, dim: int, heads: int):
        super().__init__()
        if heads < 1 or dim % heads:
            raise DimensionError(f"feature dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.w_q = uniform_fan_in(rng.child("w_q"), dim, (dim, dim))
        self.w_k = uniform_fan_in(rng.child("w_k"), dim, (dim, dim))
        self.w_v = uniform_fan_in(rng.child("w_v"), dim, (dim, dim))
        self.w_o = uniform_fan_in(rng.child("w_o"), dim, (dim, dim))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def qkv(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor):
        """Per-head queries, keys and values, each (..., H, L, d)."""
        q = split_heads(matmul(q_tokens, self.w_q), self.heads)
        k = split_heads(matmul(kv_tokens, self.w_k), self.heads)
        v = split_heads(matmul(kv_tokens, self.w_v), self.heads)
        return q, k, v


def _check(x: torch.Tensor, params: MhaParams) -> None:
    if x.ndim < 3:
        raise DimensionError(f"expected (..., T, J, C) features, got shape {tuple(x.shape)}")
    if x.shape[-1] != params.dim:
        raise DimensionError(f"feature dim {x.shape[-1]} != attention dim {params.dim}")
    if params.dim % params.heads:
        raise DimensionError(f"feature dim {params.dim} not divisible by heads {params.heads}")


def mhca(q_feat: torch.Tensor, kv_feat: torch.Tensor, params: MhaParams, axis: str,
         scale: float | None = None):
    """Queries from ``q_feat``, keys/values from ``kv_feat``.

    Returns ``(output, attention)``; output has the shape of ``q_feat`` and
    carries no residual. ``scale`` defaults to ``1/sqrt(C/H)``.
    """
    if q_feat.shape != kv_feat.shape:
        raise DimensionError(f"query/key-value shapes differ: {tuple(q_feat.shape)} vs {tuple(kv_feat.shape)}")
    _check(q_feat, params)
    if scale is None:
        scale = 1.0 / math.sqrt(params.head_dim)
    q, k, v = params.qkv(to_tokens(q_feat, axis), to_tokens(kv_feat, axis))
    attn = softmax(matmul(q, k.transpose(-1, -2)) * scale, axis=-1)
    out = matmul(merge_heads(matmul(attn, v)), params.w_o)
    return from_tokens(out, axis), attn.mean(dim=-4)


def mhsa(x: torch.Tensor, params: MhaParams, axis: str, scale: float | None = None):
    return mhca(x, x, params, axis, scale=scale)
