"""Parameterized building blocks initialized from a :class:`Rng`."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .tensor_core import DTYPE, Rng, layer_norm, matmul


def param(values: np.ndarray) -> nn.Parameter:
    return nn.Parameter(torch.from_numpy(np.ascontiguousarray(values, dtype=np.float64)).to(DTYPE))


def uniform_fan_in(rng: Rng, fan_in: int, shape) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, shape))


class Affine(nn.Module):
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, rng: Rng, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = uniform_fan_in(rng.child("weight"), d_in, (d_in, d_out))
        self.bias = uniform_fan_in(rng.child("bias"), d_in, (d_out,)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(nn.Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, rng: Rng, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = Affine(rng.child("fc1"), d_in, d_hidden)
        self.fc2 = Affine(rng.child("fc2"), d_hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))
