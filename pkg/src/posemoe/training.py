"""AdamW, learning-rate schedule, the training loop and PMCK checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .data import PoseDataset, normalize_px
from .metrics import mpjpe
from .model import ConfigError, ModelConfig, PoseMoE, flip_input, parameter_group, predict, total_loss
from .tensor_core import DTYPE, NonFiniteError, Rng, backward

log = logging.getLogger(__name__)

NO_DECAY_GROUPS = ("layer_norm", "pos_embed", "gaussian_tokens", "fusion_mu")


@dataclass
class TrainConfig:
    epochs: int = 90
    batch_size: int = 16
    lr: float = 5e-4
    lr_decay: float = 0.99
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_augment: bool = True
    flip_test: bool = True
    train_noise_px: float = 0.0
    target_scale_mm: float = 1000.0  # network predicts metres
    epoch_repeats: int = 1  # passes over the training set per epoch
    max_steps: int = 0  # 0 = no limit
    eval_every: int = 1
    eval_train: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be > 0 and lr_decay in (0, 1]")
        if self.weight_decay < 0 or self.train_noise_px < 0 or self.max_steps < 0:
            raise ConfigError("weight_decay, train_noise_px and max_steps must be >= 0")
        if self.eval_every < 1 or self.epoch_repeats < 1:
            raise ConfigError("eval_every and epoch_repeats must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config key(s): {', '.join(unknown)}")
        return cls(**d)


def lr_schedule(epoch: int, lr0: float = 5e-4, decay: float = 0.99) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay**epoch


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: dict[str, torch.Tensor], state: OptimState, lr: float,
               no_decay: Iterable[str] = ()) -> None:
    """In-place decoupled-weight-decay Adam update of every parameter that has a gradient."""
    no_decay = set(no_decay)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            if m.shape != g.shape or v.shape != g.shape:
                raise ValueError(f"optimizer state for {name} has shape {tuple(m.shape)}, gradient {tuple(g.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / c1) / ((v / c2).sqrt() + state.eps)
            wd = 0.0 if name in no_decay else state.weight_decay
            p.sub_(lr * update + (lr * wd) * p)


def no_decay_names(model: torch.nn.Module) -> set[str]:
    return {n for n, _ in model.named_parameters() if parameter_group(n) in NO_DECAY_GROUPS}


# ---------------------------------------------------------------------------
# evaluation helpers


def predict_mm(model: PoseMoE, dataset: PoseDataset, pose2d_px: np.ndarray | None = None,
               flip_test: bool = True, scale_mm: float = 1000.0, batch_size: int = 64) -> np.ndarray:
    """Root-relative camera-space predictions in mm, (N, T, J, 3)."""
    x_all = dataset.inputs(pose2d_px)
    pairs = dataset.skeleton.mirror_pairs if flip_test else None
    out = []
    with torch.no_grad():
        for start in range(0, len(x_all), batch_size):
            x = torch.from_numpy(x_all[start:start + batch_size]).to(DTYPE)
            out.append(predict(model, x, pairs).numpy())
    if not out:
        return np.zeros(dataset.pose3d_mm.shape)
    return np.concatenate(out) * scale_mm


def evaluate_mpjpe(model, dataset, flip_test=True, scale_mm=1000.0, root=None) -> float:
    pred = predict_mm(model, dataset, flip_test=flip_test, scale_mm=scale_mm)
    return mpjpe(pred, dataset.pose3d_mm, dataset.skeleton.root if root is None else root)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    seed: int = 0
    metrics: dict = field(default_factory=dict)
    optimizer: OptimState | None = None
    dtype: str = "f32"

    def build_model(self) -> PoseMoE:
        model = PoseMoE(self.model_config)
        load_params(model, self.params)
        return model


class TrainingAborted(RuntimeError):
    pass


def _batch_tensors(dataset: PoseDataset, idx, rng: Rng, cfg: TrainConfig):
    px = dataset.pose2d_px[idx]
    if cfg.train_noise_px > 0:
        px = px + cfg.train_noise_px * rng.child("noise").normal(px.shape)
    x = torch.from_numpy(normalize_px(px, dataset.camera)).to(DTYPE)
    y = torch.from_numpy(dataset.pose3d_mm[idx] / cfg.target_scale_mm).to(DTYPE)
    if cfg.flip_augment:
        flip = torch.from_numpy(rng.child("flip").uniform(0.0, 1.0, (len(idx),)) < 0.5)
        if bool(flip.any()):
            pairs = dataset.skeleton.mirror_pairs
            x = torch.where(flip[:, None, None, None], flip_input(x, pairs), x)
            y = torch.where(flip[:, None, None, None], flip_input(y, pairs), y)
    return x, y


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(model_cfg: ModelConfig, cfg: TrainConfig, train_set: PoseDataset,
          val_set: PoseDataset | None = None, callbacks: Iterable[Callable[[dict], None]] = (),
          out_dir=None, resume: Checkpoint | None = None, log_path=None) -> Checkpoint:
    """Run the recipe; returns the final checkpoint (also written to ``out_dir`` if given)."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if (train_set.frames, train_set.joints) != (model_cfg.frames, model_cfg.joints):
        raise ConfigError(f"data is T={train_set.frames}, J={train_set.joints}; "
                          f"model expects T={model_cfg.frames}, J={model_cfg.joints}")
    callbacks = list(callbacks)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "a" if resume else "w") if log_path else None

    model = PoseMoE(model_cfg)
    state = OptimState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    first_epoch, step, best = 0, 0, math.inf
    if resume is not None:
        load_params(model, resume.params)
        if resume.optimizer is not None:
            state = resume.optimizer
        first_epoch, step = resume.epoch + 1, resume.step
        best = resume.metrics.get("best_val_mpjpe", math.inf)
    params = dict(model.named_parameters())
    skip_decay = no_decay_names(model)
    eval_set = val_set if val_set is not None and len(val_set) else train_set
    master = Rng(cfg.seed).child("train")

    def emit(record):
        if log_file:
            log_file.write(metrics_line(record) + "\n")
            log_file.flush()
        for cb in callbacks:
            cb(record)

    def snapshot(epoch, metrics, dtype):
        return Checkpoint(model_cfg, cfg, {n: p.detach().numpy().copy() for n, p in params.items()},
                          epoch=epoch, step=step, seed=cfg.seed, metrics=dict(metrics),
                          optimizer=state, dtype=dtype)

    if resume is None:
        val0 = evaluate_mpjpe(model, eval_set, cfg.flip_test, cfg.target_scale_mm)
        record = {"epoch": -1, "step": 0, "val_mpjpe": val0}
        if cfg.eval_train:
            record["train_mpjpe"] = evaluate_mpjpe(model, train_set, cfg.flip_test, cfg.target_scale_mm)
        emit(record)

    ckpt = None
    n = len(train_set)
    try:
        for epoch in range(first_epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay)
            erng = master.child(f"epoch{epoch}")
            order = np.concatenate([erng.child(f"shuffle{r}" if r else "shuffle").permutation(n)
                                    for r in range(cfg.epoch_repeats)])
            losses = []
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                brng = erng.child(f"batch{b}")
                x, y = _batch_tensors(train_set, idx, brng, cfg)
                y2d, yd, y3d = model(x)
                loss = total_loss(y2d, yd, y3d, y, model_cfg.lambda_t)
                if not bool(torch.isfinite(loss)):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {b} (batch seed key {brng!r})")
                for p in params.values():
                    p.grad = None
                backward(loss)
                adamw_step(params, state, lr, skip_decay)
                losses.append(float(loss.detach()))
                step += 1
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            record = {"epoch": epoch, "step": step, "lr": lr, "train_loss": float(np.mean(losses))}
            done = bool(cfg.max_steps and step >= cfg.max_steps) or epoch == cfg.epochs - 1
            if (epoch + 1) % cfg.eval_every == 0 or done:
                val = evaluate_mpjpe(model, eval_set, cfg.flip_test, cfg.target_scale_mm)
                record["val_mpjpe"] = val
                if cfg.eval_train:
                    record["train_mpjpe"] = evaluate_mpjpe(model, train_set, cfg.flip_test, cfg.target_scale_mm)
                if val < best:
                    best = val
                    if out is not None:
                        save_checkpoint(out / "best.pmck", snapshot(epoch, {"val_mpjpe": val}, "f32"))
            emit(record)
            ckpt = snapshot(epoch, {"best_val_mpjpe": best, **record}, "f64")
            if out is not None:
                save_checkpoint(out / "last.pmck", ckpt)
            if done:
                break
    finally:
        if log_file:
            log_file.close()
    return ckpt


# ---------------------------------------------------------------------------
# checkpoints

PMCK_MAGIC = b"PMCK"
PMCK_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def load_params(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(tensors))
    if missing:
        raise MissingParameterError(f"checkpoint lacks parameter(s): {', '.join(missing[:5])}")
    extra = sorted(set(tensors) - set(own))
    if extra:
        raise MissingParameterError(f"checkpoint has unknown parameter(s): {', '.join(extra[:5])}")
    for name, p in own.items():
        if tuple(tensors[name].shape) != tuple(p.shape):
            raise ShapeMismatchError(f"{name}: checkpoint {tuple(tensors[name].shape)}, model {tuple(p.shape)}")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(torch.from_numpy(np.asarray(tensors[name], dtype=np.float64)))


def _tensor_block(name: str, arr: np.ndarray, dtype: str) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    payload = arr.astype("<f8" if dtype == "f64" else "<f4").tobytes()
    return b"".join([struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                     struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<Q", len(payload)), payload])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.dtype not in ("f32", "f64"):
        raise ValueError("dtype must be f32 or f64")
    tensors = dict(ckpt.params)
    opt = ckpt.optimizer
    if opt is not None:
        for name in sorted(opt.m):
            tensors[f"optim.m/{name}"] = opt.m[name].numpy()
            tensors[f"optim.v/{name}"] = opt.v[name].numpy()
    header = {
        "model": ckpt.model_config.to_dict(),
        "training": asdict(ckpt.train_config),
        "epoch": ckpt.epoch, "step": ckpt.step, "seed": ckpt.seed, "metrics": ckpt.metrics,
        "dtype": ckpt.dtype, "tensors": len(tensors),
        "optimizer": None if opt is None else {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
                                               "eps": opt.eps, "weight_decay": opt.weight_decay},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blocks = [_tensor_block(n, tensors[n], ckpt.dtype) for n in sorted(tensors)]
    Path(path).write_bytes(b"".join([PMCK_MAGIC, struct.pack("<BI", PMCK_VERSION, len(head)), head, *blocks]))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != PMCK_MAGIC:
        raise CheckpointError("not a PMCK checkpoint (bad magic)")
    if len(buf) < 9:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != PMCK_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    pos = 9
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    dtype = "<f8" if header["dtype"] == "f64" else "<f4"
    width = 8 if header["dtype"] == "f64" else 4
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(header["tensors"]):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            (plen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            count = int(np.prod(shape)) if ndim else 1
            if plen != count * width or pos + plen > len(buf):
                raise CheckpointError(f"tensor {name}: payload length {plen} does not match shape {shape}")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += plen
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError("trailing bytes after tensor blocks")
    model_cfg = ModelConfig.from_dict(header["model"])
    train_cfg = TrainConfig.from_dict(header["training"])
    params = {n: t for n, t in tensors.items() if not n.startswith("optim.")}
    opt = None
    if header.get("optimizer"):
        o = header["optimizer"]
        opt = OptimState(step=o["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                         weight_decay=o["weight_decay"])
        for n, t in tensors.items():
            if n.startswith("optim.m/"):
                opt.m[n[8:]] = torch.from_numpy(t.copy())
            elif n.startswith("optim.v/"):
                opt.v[n[8:]] = torch.from_numpy(t.copy())
    ckpt = Checkpoint(model_cfg, train_cfg, params, epoch=header["epoch"], step=header["step"],
                      seed=header["seed"], metrics=header["metrics"], optimizer=opt, dtype=header["dtype"])
    # Validate names and shapes against the config now, not at first use.
    load_params(PoseMoE(model_cfg), params)
    return ckpt
