"""Central finite-difference verification of reverse-mode gradients.

For each parameter tensor the analytic gradient ``a`` and the numerical
gradient ``f`` (step ``h``, float64) are compared with
``||a - f|| / max(||a||, ||f||, floor)``. The floor keeps tensors whose
gradient is numerically zero from turning round-off into relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .model import ModelConfig, PoseMoE, parameter_group, total_loss
from .tensor_core import DTYPE, Rng

MAX_PARAMETERS = 1_000_000
GRAD_FLOOR = 1e-8


@dataclass
class GradRow:
    name: str
    group: str
    numel: int
    abs_err: float
    rel_err: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor))


def numerical_grad(loss_fn: Callable[[], torch.Tensor], p: torch.Tensor, h: float = 1e-5) -> np.ndarray:
    out = np.zeros(p.shape)
    flat = p.data.view(-1)
    grad = out.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * h)
    return out


def check_gradients(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
                    tolerance: float = 1e-4, h: float = 1e-5,
                    corrupt: str | None = None) -> list[GradRow]:
    """Compare autograd against central differences for every tensor in ``params``.

    ``corrupt`` names a parameter whose analytic gradient is deliberately
    scaled by 1.5, a negative control for the harness itself.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    rows = []
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.detach().numpy().copy()
        if name == corrupt:
            analytic *= 1.5
        numeric = numerical_grad(loss_fn, p, h)
        rel = relative_error(analytic, numeric)
        rows.append(GradRow(name, parameter_group(name), p.numel(),
                            float(np.abs(analytic - numeric).max()), rel, rel < tolerance))
    return rows


def model_gradcheck(config: ModelConfig, tolerance: float = 1e-4, h: float = 1e-5, batch: int = 2,
                    corrupt: str | None = None, seed: int = 0) -> list[GradRow]:
    """Gradient check of the full training loss on random inputs and targets."""
    model = PoseMoE(config)
    n = sum(p.numel() for p in model.parameters())
    if n >= MAX_PARAMETERS:
        raise ValueError(f"gradcheck refuses configs with {n} >= {MAX_PARAMETERS} parameters")
    if corrupt is not None and corrupt not in dict(model.named_parameters()):
        raise KeyError(f"no parameter named {corrupt!r}")
    rng = Rng(seed).child("gradcheck")
    shape = (batch, config.frames, config.joints)
    x = torch.from_numpy(0.5 * rng.child("x").normal(shape + (2,))).to(DTYPE)
    y = torch.from_numpy(0.5 * rng.child("y").normal(shape + (3,))).to(DTYPE)

    def loss_fn():
        y2d, yd, y3d = model(x)
        return total_loss(y2d, yd, y3d, y, config.lambda_t)

    return check_gradients(loss_fn, dict(model.named_parameters()), tolerance, h, corrupt)


def summarize(rows: list[GradRow]) -> dict[str, tuple[float, bool]]:
    """Worst relative error and pass flag per parameter group."""
    out: dict[str, tuple[float, bool]] = {}
    for r in rows:
        worst, ok = out.get(r.group, (0.0, True))
        out[r.group] = (max(worst, r.rel_err), ok and r.passed)
    return out
