"""Cross-expert knowledge aggregation (CEKA) decoder.

One CEKA stage, for either axis:

1. Bidirectional cross attention between the two streams (pre-norm residual),
   yielding the matrices ``m_2d_d`` (2D queries, depth keys) and ``m_d_2d``.
2. Aggregation matrices ``m_2d_2d = m_2d_d @ m_d_2d`` and
   ``m_d_d = m_d_2d @ m_2d_d``, per head.
3. Per branch, with ``Q, K, V`` from the branch stream,
   ``fused = sigmoid(mu) * m_branch + (1 - sigmoid(mu)) * Q K^T`` and
   ``out = x + softmax(fused / sqrt(C)) V W_O``.

The aggregation matrix is post-softmax while ``Q K^T`` are raw logits; the two
are mixed as-is and ``mu`` is left to find the balance. The divisor is the full
feature width ``C``, not the per-head width.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .attention import SPATIAL, TEMPORAL, MhaParams, from_tokens, mhca, merge_heads, to_tokens
from .layers import LayerNorm
from .tensor_core import DTYPE, DimensionError, Rng, matmul, softmax


class CrossExpertAttention(nn.Module):
    """Step (3) for one branch: self attention fused with an aggregation matrix."""

    def __init__(self, rng: Rng, dim: int, heads: int):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.attn = MhaParams(rng, dim, heads)
        self.mu = nn.Parameter(torch.zeros((), dtype=DTYPE))

    def forward(self, x, aggregation, axis: str, enabled: bool = True):
        tokens = to_tokens(self.norm(x), axis)
        q, k, v = self.attn.qkv(tokens, tokens)
        logits = matmul(q, k.transpose(-1, -2))
        if enabled and aggregation is not None:
            w = torch.sigmoid(self.mu)
            fused = w * aggregation.unsqueeze(-4) + (1.0 - w) * logits
        else:
            fused = logits
        attn = softmax(fused / math.sqrt(self.attn.dim), -1)
        out = matmul(merge_heads(matmul(attn, v)), self.attn.w_o)
        return x + from_tokens(out, axis), fused


class CekaBlock(nn.Module):
    def __init__(self, rng: Rng, dim: int, heads: int, axis: str,
                 cross_attention: bool = True, cross_expert: bool = True):
        super().__init__()
        if axis not in (SPATIAL, TEMPORAL):
            raise ValueError(f"bad axis {axis!r}")
        self.axis = axis
        self.cross_attention = cross_attention
        self.cross_expert = cross_expert
        self.norm_q_2d = LayerNorm(dim)
        self.norm_kv_2d = LayerNorm(dim)
        self.norm_q_d = LayerNorm(dim)
        self.norm_kv_d = LayerNorm(dim)
        self.cross_2d = MhaParams(rng.child("cross_2d"), dim, heads)
        self.cross_d = MhaParams(rng.child("cross_d"), dim, heads)
        self.expert_2d = CrossExpertAttention(rng.child("expert_2d"), dim, heads)
        self.expert_d = CrossExpertAttention(rng.child("expert_d"), dim, heads)

    def forward(self, f2d, fd, details: dict | None = None):
        if f2d.shape != fd.shape:
            raise DimensionError(f"CEKA streams differ: {tuple(f2d.shape)} vs {tuple(fd.shape)}")
        if self.cross_attention:
            a2d, m_2d_d = mhca(self.norm_q_2d(f2d), self.norm_kv_2d(fd), self.cross_2d, self.axis)
            ad, m_d_2d = mhca(self.norm_q_d(fd), self.norm_kv_d(f2d), self.cross_d, self.axis)
            x2d, xd = f2d + a2d, fd + ad
            m_2d_2d = matmul(m_2d_d, m_d_2d)
            m_d_d = matmul(m_d_2d, m_2d_d)
        else:
            x2d, xd = f2d, fd
            m_2d_d = m_d_2d = m_2d_2d = m_d_d = None
        out_2d, fused_2d = self.expert_2d(x2d, m_2d_2d, self.axis, self.cross_expert)
        out_d, fused_d = self.expert_d(xd, m_d_d, self.axis, self.cross_expert)
        if details is not None:
            details.update(m_2d_d=m_2d_d, m_d_2d=m_d_2d, m_2d_2d=m_2d_2d, m_d_d=m_d_d,
                           cross_2d=x2d, cross_d=xd, fused_2d=fused_2d, fused_d=fused_d)
        return out_2d, out_d


class DecoderLayer(nn.Module):
    """Spatial CEKA followed by temporal CEKA."""

    def __init__(self, rng: Rng, dim: int, heads: int, cross_attention: bool = True,
                 cross_expert: bool = True):
        super().__init__()
        self.spatial = CekaBlock(rng.child("spatial"), dim, heads, SPATIAL, cross_attention, cross_expert)
        self.temporal = CekaBlock(rng.child("temporal"), dim, heads, TEMPORAL, cross_attention, cross_expert)

    def forward(self, f2d, fd):
        f2d, fd = self.spatial(f2d, fd)
        return self.temporal(f2d, fd)


def ceka(f2d, fd, block: CekaBlock, details: dict | None = None):
    return block(f2d, fd, details)


def decoder_forward(f2d, fd, layers):
    for layer in layers:
        f2d, fd = layer(f2d, fd)
    return f2d, fd
