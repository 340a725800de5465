"""Full lifting network: embedding, expert encoder, CEKA decoder, regression heads and losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import torch
from torch import nn

from .ceka_decoder import DecoderLayer, decoder_forward
from .layers import MLP, Affine, LayerNorm, param
from .moe_encoder import TOKEN_INITS, EncoderLayer, encoder_forward
from .tensor_core import DimensionError, Rng


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class ModelConfig:
    frames: int = 27
    joints: int = 17
    dim: int = 64
    heads: int = 8
    encoder_layers: int = 12
    decoder_layers: int = 1
    lambda_t: float = 0.5
    token_init: str = "gaussian"
    cross_attention: bool = True
    cross_expert: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.frames < 1 or self.joints < 1 or self.encoder_layers < 1:
            raise ConfigError("frames, joints and encoder_layers must be >= 1")
        if self.decoder_layers < 0:
            raise ConfigError("decoder_layers must be >= 0")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim ({self.dim}) must be a positive multiple of heads ({self.heads})")
        if self.lambda_t < 0:
            raise ConfigError(f"lambda_t must be >= 0, got {self.lambda_t}")
        if self.token_init not in TOKEN_INITS:
            raise ConfigError(f"token_init must be one of {TOKEN_INITS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**d)


class RegressionHead(nn.Module):
    """LayerNorm -> Linear(C, C) -> GELU -> Linear(C, out)."""

    def __init__(self, rng: Rng, dim: int, out: int):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.mlp = MLP(rng, dim, dim, out)

    def forward(self, x):
        return self.mlp(self.norm(x))


class PoseMoE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = Rng(config.seed).child("model")
        t, j, c = config.frames, config.joints, config.dim
        self.embed = Affine(rng.child("embed"), 2, c)
        self.input_proj = Affine(rng.child("input_proj"), 2, c)
        self.pos_2d = param(0.02 * rng.child("pos_2d").normal((t, j, c)))
        self.pos_d = param(0.02 * rng.child("pos_d").normal((t, j, c)))
        self.encoder = nn.ModuleList(
            EncoderLayer(rng.child(f"encoder.{i}"), t, j, c, config.heads, config.token_init)
            for i in range(config.encoder_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(rng.child(f"decoder.{i}"), c, config.heads,
                         config.cross_attention, config.cross_expert)
            for i in range(config.decoder_layers)
        )
        self.head_2d = RegressionHead(rng.child("head_2d"), c, 2)
        self.head_d = RegressionHead(rng.child("head_d"), c, 1)

    def _check_input(self, x):
        cfg = self.config
        if x.ndim < 3 or tuple(x.shape[-3:]) != (cfg.frames, cfg.joints, 2):
            raise DimensionError(
                f"input must end in ({cfg.frames}, {cfg.joints}, 2), got {tuple(x.shape)}")

    def streams(self, x, bypass_decoder: bool = False):
        """Encoder/decoder stream pairs at every layer boundary, last entry final."""
        self._check_input(x)
        f = self.embed(x)
        fp = self.input_proj(x)
        boundaries: list = []
        f2d, fd = encoder_forward(f + self.pos_2d, f + self.pos_d, fp, self.encoder, boundaries)
        if not bypass_decoder and len(self.decoder):
            f2d, fd = decoder_forward(f2d, fd, self.decoder)
            boundaries.append((f2d, fd))
        return boundaries

    def forward(self, x, bypass_decoder: bool = False):
        f2d, fd = self.streams(x, bypass_decoder)[-1]
        y2d = self.head_2d(f2d)
        yd = self.head_d(fd)
        return y2d, yd, torch.cat([y2d, yd], dim=-1)


def saturate_routers(model: PoseMoE, bias: float = 1e9) -> None:
    """Pin every router gate to its own stream (a diagnostic for stream decoupling)."""
    with torch.no_grad():
        for layer in model.encoder:
            for gate, own in ((layer.router.gate_2d, 0), (layer.router.gate_d, 1)):
                gate.weight.zero_()
                gate.bias.fill_(-bias)
                gate.bias[own] = bias


def census(model: nn.Module) -> dict[str, int]:
    """Parameter counts keyed by top-level parameter group, plus ``total``."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        group = parameter_group(name)
        counts[group] = counts.get(group, 0) + p.numel()
    counts["total"] = sum(p.numel() for p in model.parameters())
    return counts


def parameter_group(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if name in ("pos_2d", "pos_d"):
        return "pos_embed"
    if leaf == "gaussian_tokens":
        return "gaussian_tokens"
    if leaf == "mu":
        return "fusion_mu"
    if ".router." in name:
        return "router"
    parts = name.split(".")
    if len(parts) >= 2 and "norm" in parts[-2]:
        return "layer_norm"
    return name.split(".", 1)[0]


def flip_input(x: torch.Tensor, pairs: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Mirror normalized 2D input (or camera-space output) about the vertical axis."""
    perm = mirror_permutation(x.shape[-2], pairs)
    y = x[..., perm, :].clone()
    y[..., 0] = -y[..., 0]
    return y


def mirror_permutation(joints: int, pairs: Sequence[tuple[int, int]]) -> list[int]:
    perm = list(range(joints))
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return perm


def predict(model: PoseMoE, x: torch.Tensor, flip_pairs: Sequence[tuple[int, int]] | None = None):
    """3D prediction, averaged with the unflipped prediction of the mirrored input if pairs given."""
    y = model(x)[2]
    if flip_pairs:
        y = 0.5 * (y + flip_input(model(flip_input(x, flip_pairs))[2], flip_pairs))
    return y


def _same_shape(pred, gt):
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")


def loss_2d(pred, gt):
    _same_shape(pred, gt)
    return torch.linalg.vector_norm(pred - gt, dim=-1).mean()


def loss_depth(pred, gt):
    _same_shape(pred, gt)
    return (pred - gt).abs().mean()


def loss_temporal(pred, gt):
    """Mean distance between predicted and true frame-to-frame velocities."""
    _same_shape(pred, gt)
    if pred.shape[-3] < 2:
        return pred.sum() * 0.0
    dp = pred[..., 1:, :, :] - pred[..., :-1, :, :]
    dg = gt[..., 1:, :, :] - gt[..., :-1, :, :]
    return torch.linalg.vector_norm(dp - dg, dim=-1).mean()


def total_loss(pred_2d, pred_d, pred_3d, gt_3d, lambda_t: float):
    if lambda_t < 0:
        raise ConfigError(f"lambda_t must be >= 0, got {lambda_t}")
    loss = loss_2d(pred_2d, gt_3d[..., :2]) + loss_depth(pred_d, gt_3d[..., 2:])
    if lambda_t:
        loss = loss + lambda_t * loss_temporal(pred_3d, gt_3d)
    return loss
