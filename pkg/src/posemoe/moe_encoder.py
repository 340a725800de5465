"""Mixture-of-experts encoder: 2D pose expert, depth expert and pose router.

Each attention sub-block is wrapped pre-norm with a residual,
``x + attn(LN(x))``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .attention import SPATIAL, TEMPORAL, MhaParams, mhca, mhsa
from .layers import MLP, Affine, LayerNorm, param
from .tensor_core import DimensionError, Rng, softmax

TOKEN_INITS = ("gaussian", "zero", "laplace")
LAPLACE_SCALE = 1.0 / math.sqrt(2.0)  # unit variance


def init_tokens(rng: Rng, shape, scheme: str = "gaussian") -> nn.Parameter:
    if scheme == "gaussian":
        return param(rng.normal(shape))
    if scheme == "zero":
        return param(np.zeros(shape))
    if scheme == "laplace":
        return param(rng.laplace(LAPLACE_SCALE, shape))
    raise ValueError(f"unknown token init {scheme!r}; expected one of {TOKEN_INITS}")


class PreNormSelf(nn.Module):
    def __init__(self, rng: Rng, dim: int, heads: int, axis: str):
        super().__init__()
        self.axis = axis
        self.norm = LayerNorm(dim)
        self.attn = MhaParams(rng, dim, heads)

    def forward(self, x):
        out, _ = mhsa(self.norm(x), self.attn, self.axis)
        return x + out


class PreNormCross(nn.Module):
    def __init__(self, rng: Rng, dim: int, heads: int, axis: str):
        super().__init__()
        self.axis = axis
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MhaParams(rng, dim, heads)

    def forward(self, x, kv):
        out, matrix = mhca(self.norm_q(x), self.norm_kv(kv), self.attn, self.axis)
        return x + out, matrix


class PoseExpert2D(nn.Module):
    def __init__(self, rng: Rng, dim: int, heads: int):
        super().__init__()
        self.spatial_self = PreNormSelf(rng.child("s_sa"), dim, heads, SPATIAL)
        self.spatial_cross = PreNormCross(rng.child("s_ca"), dim, heads, SPATIAL)
        self.temporal_self = PreNormSelf(rng.child("t_sa"), dim, heads, TEMPORAL)
        self.temporal_cross = PreNormCross(rng.child("t_ca"), dim, heads, TEMPORAL)

    def forward(self, f2d, fp):
        if f2d.shape != fp.shape:
            raise DimensionError(f"2D features {tuple(f2d.shape)} and input projection {tuple(fp.shape)} differ")
        x = self.spatial_self(f2d)
        x, _ = self.spatial_cross(x, fp)
        x = self.temporal_self(x)
        x, _ = self.temporal_cross(x, fp)
        return x


class DepthExpert(nn.Module):
    """Fuses the stream with learnable tokens, then spatial and temporal MHSA."""

    def __init__(self, rng: Rng, frames: int, joints: int, dim: int, heads: int,
                 token_init: str = "gaussian"):
        super().__init__()
        self.gaussian_tokens = init_tokens(rng.child("tokens"), (frames, joints, dim), token_init)
        self.compress = MLP(rng.child("compress"), 2 * dim, dim, dim)
        self.spatial_self = PreNormSelf(rng.child("s_sa"), dim, heads, SPATIAL)
        self.temporal_self = PreNormSelf(rng.child("t_sa"), dim, heads, TEMPORAL)

    def forward(self, fd):
        if fd.shape[-3:] != self.gaussian_tokens.shape:
            raise DimensionError(f"depth features {tuple(fd.shape)} do not end in {tuple(self.gaussian_tokens.shape)}")
        tokens = self.gaussian_tokens.expand(fd.shape)
        x = self.compress(torch.cat([fd, tokens], dim=-1))
        return self.temporal_self(self.spatial_self(x))


class PoseRouter(nn.Module):
    """Per-token two-way softmax gates, one gating layer per output stream."""

    def __init__(self, rng: Rng, dim: int):
        super().__init__()
        self.gate_2d = Affine(rng.child("gate_2d"), 2 * dim, 2)
        self.gate_d = Affine(rng.child("gate_d"), 2 * dim, 2)

    def gates(self, f2d, fd):
        both = torch.cat([f2d, fd], dim=-1)
        return softmax(self.gate_2d(both), -1), softmax(self.gate_d(both), -1)

    def forward(self, f2d, fd):
        if f2d.shape != fd.shape:
            raise DimensionError(f"router inputs differ: {tuple(f2d.shape)} vs {tuple(fd.shape)}")
        g2d, gd = self.gates(f2d, fd)
        out_2d = g2d[..., 0:1] * f2d + g2d[..., 1:2] * fd
        out_d = gd[..., 0:1] * f2d + gd[..., 1:2] * fd
        return out_2d, out_d


class EncoderLayer(nn.Module):
    def __init__(self, rng: Rng, frames: int, joints: int, dim: int, heads: int,
                 token_init: str = "gaussian"):
        super().__init__()
        self.pose_expert = PoseExpert2D(rng.child("pose_expert"), dim, heads)
        self.depth_expert = DepthExpert(rng.child("depth_expert"), frames, joints, dim, heads, token_init)
        self.router = PoseRouter(rng.child("router"), dim)

    def forward(self, f2d, fd, fp):
        return self.router(self.pose_expert(f2d, fp), self.depth_expert(fd))


def pose_expert_2d(f2d, fp, layer: EncoderLayer):
    return layer.pose_expert(f2d, fp)


def depth_expert(fd, layer: EncoderLayer):
    return layer.depth_expert(fd)


def pose_router(f2d, fd, layer: EncoderLayer):
    return layer.router(f2d, fd)


def encoder_forward(f2d, fd, fp, layers, collect: list | None = None):
    """Run the stacked layers; optionally append each layer's output pair to ``collect``."""
    for layer in layers:
        f2d, fd = layer(f2d, fd, fp)
        if collect is not None:
            collect.append((f2d, fd))
    return f2d, fd
