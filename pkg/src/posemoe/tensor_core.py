"""Dense float64 array math with a reverse-mode differentiation contract.

Tensors are ``torch.Tensor`` objects in float64; torch's autograd records the
computation graph and runs the reverse sweep. This module pins the pieces of
that contract the rest of the package relies on: shape checking, finite-value
checking, the softmax/layer-norm conventions, and a single documented PRNG.

All randomness is drawn from numpy's PCG64 bit generator. Named sub-streams are
derived from the master seed with ``numpy.random.SeedSequence`` using a CRC32
of the stream name as the spawn key, so a stream depends only on
``(master_seed, name)`` and is identical on every platform.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np
import torch

DTYPE = torch.float64
LN_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf."""


class Rng:
    """Seeded PCG64 stream with deterministic named children."""

    algorithm = "PCG64"

    def __init__(self, seed: int, *, _key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._key = tuple(_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def child(self, name: str | int) -> "Rng":
        """Independent stream for ``name``; does not advance this stream."""
        tag = zlib.crc32(str(name).encode("utf-8"))
        return Rng(self.seed, _key=self._key + (tag,))

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self.generator.standard_normal(tuple(shape))

    def uniform(self, low: float, high: float, shape: Sequence[int] = ()) -> np.ndarray:
        return self.generator.uniform(low, high, tuple(shape))

    def laplace(self, scale: float, shape: Sequence[int]) -> np.ndarray:
        return self.generator.laplace(0.0, scale, tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, shape: Sequence[int] = ()) -> np.ndarray:
        return self.generator.integers(low, high, tuple(shape))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self._key})"


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Build a float64 tensor, rejecting non-finite entries."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64)).clone()
    check_finite(t)
    return t.requires_grad_(requires_grad)


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        bad = int((~torch.isfinite(t)).sum())
        raise NonFiniteError(f"{name} has {bad} non-finite entries")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch's kernel subtracts the slice maximum before exponentiating.
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for {x.ndim}-d tensor")
    return torch.softmax(x, dim=axis)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"gain/bias must have shape ({c},), got {tuple(gain.shape)}, {tuple(bias.shape)}")
    return torch.nn.functional.layer_norm(x, (c,), gain, bias, eps=LN_EPS)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``.grad`` slot."""
    if loss.numel() != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()


def gauss_sample(rng: Rng, shape: Sequence[int]) -> torch.Tensor:
    return torch.from_numpy(rng.normal(shape)).to(DTYPE)
