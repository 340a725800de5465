"""Pose-error metrics and model diagnostics. Positions are in millimetres unless noted."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import CameraModel, ProjectionError
from .tensor_core import Rng

log = logging.getLogger(__name__)

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.linspace(0.0, 150.0, 31)


class AlignmentError(ValueError):
    """Point set too degenerate for a Procrustes fit."""


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if pred.ndim < 2 or pred.shape[-1] != 3:
        raise ValueError(f"expected (..., J, 3) poses, got {pred.shape}")
    return pred, gt


def root_align(pose: np.ndarray, root: int = 0) -> np.ndarray:
    if not 0 <= root < pose.shape[-2]:
        raise ValueError(f"root index {root} out of range")
    return pose - pose[..., root:root + 1, :]


def joint_errors(pred, gt, root: int = 0) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(root_align(pred, root) - root_align(gt, root), axis=-1)


def mpjpe(pred, gt, root: int = 0) -> float:
    return float(joint_errors(pred, gt, root).mean())


def axis_mpjpe(pred, gt, root: int = 0) -> dict[str, float]:
    """Root-aligned mean absolute error per coordinate axis."""
    pred, gt = _pair(pred, gt)
    err = np.abs(root_align(pred, root) - root_align(gt, root)).reshape(-1, 3).mean(axis=0)
    return {"x": float(err[0]), "y": float(err[1]), "z": float(err[2])}


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity transform (rotation, uniform scale, translation) of ``pred`` onto ``gt``, per frame."""
    pred, gt = _pair(pred, gt)
    shape = pred.shape
    p = pred.reshape(-1, *shape[-2:])
    g = gt.reshape(-1, *shape[-2:])
    mu_p = p.mean(axis=1, keepdims=True)
    mu_g = g.mean(axis=1, keepdims=True)
    p0, g0 = p - mu_p, g - mu_g
    for i in range(len(p0)):
        for name, pts in (("prediction", p0[i]), ("ground truth", g0[i])):
            sv = np.linalg.svd(pts, compute_uv=False)
            if sv.size < 2 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
                raise AlignmentError(f"{name} frame {i} has rank < 2")
    h = np.einsum("fji,fjk->fik", p0, g0)  # cross-covariance
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.einsum("fij,fjk->fik", u, vt)))
    fix = np.ones_like(s)
    fix[:, -1] = d
    rot = np.einsum("fij,fj,fjk->fik", u, fix, vt)  # applied as p0 @ rot
    scale = (s * fix).sum(axis=1) / (p0**2).sum(axis=(1, 2))
    aligned = scale[:, None, None] * np.einsum("fji,fik->fjk", p0, rot) + mu_g
    return aligned.reshape(shape)


def p_mpjpe(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - gt, axis=-1).mean())


def pck_auc(pred, gt, root: int = 0, threshold_mm: float = PCK_THRESHOLD_MM,
            thresholds: Sequence[float] = AUC_THRESHOLDS_MM) -> tuple[float, float]:
    """Fraction of joints within ``threshold_mm`` and mean PCK over ``thresholds``."""
    err = joint_errors(pred, gt, root).ravel()
    thresholds = np.asarray(thresholds, dtype=np.float64)
    # Integer counts keep both values exact ratios, independent of summation order.
    pck = int(np.count_nonzero(err <= threshold_mm)) / err.size
    hits = int(np.count_nonzero(err[None, :] <= thresholds[:, None]))
    return pck, hits / (err.size * thresholds.size)


def reproject_to_image(pose3d_rel: np.ndarray, camera: CameraModel, root_mm: np.ndarray) -> np.ndarray:
    """Pixel coordinates of root-relative poses (T, J, 3) placed at the true root (T, 3) or (T, 1, 3)."""
    pose = np.asarray(pose3d_rel, dtype=np.float64)
    root = np.asarray(root_mm, dtype=np.float64)
    if root.ndim == pose.ndim - 1:
        root = root[..., None, :]
    absolute = pose + root
    if np.any(absolute[..., 2] <= 0):
        bad = sorted({int(j) for j in np.argwhere(absolute[..., 2] <= 0)[:, -1]})
        raise ProjectionError(f"nonpositive reconstructed depth at joint(s) {bad}")
    return camera.project(absolute)


def pixel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean Euclidean pixel distance per frame, (..., T)."""
    return np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1).mean(axis=-1)


@dataclass
class EvalReport:
    mpjpe_mm: float
    p_mpjpe_mm: float
    pck_150: float
    auc: float
    per_axis: dict[str, float]
    n_sequences: int = 0
    n_frames: int = 0
    per_action: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        rows = [("mpjpe_mm", self.mpjpe_mm), ("p_mpjpe_mm", self.p_mpjpe_mm), ("pck_150", self.pck_150),
                ("auc", self.auc), ("mpjpe_x_mm", self.per_axis["x"]), ("mpjpe_y_mm", self.per_axis["y"]),
                ("mpjpe_z_mm", self.per_axis["z"]), ("n_sequences", self.n_sequences),
                ("n_frames", self.n_frames)]
        rows += [(f"action.{k}", v) for k, v in sorted(self.per_action.items())]
        return "".join(f"{k}={v!r}\n" for k, v in rows)


def evaluate(pred, gt, root: int = 0) -> EvalReport:
    pred, gt = _pair(pred, gt)
    pck, auc = pck_auc(pred, gt, root)
    lead = pred.shape[:-2]
    return EvalReport(
        mpjpe_mm=mpjpe(pred, gt, root), p_mpjpe_mm=p_mpjpe(pred, gt), pck_150=pck, auc=auc,
        per_axis=axis_mpjpe(pred, gt, root),
        n_sequences=int(lead[0]) if len(lead) > 1 else 1, n_frames=int(np.prod(lead)),
    )


# ---------------------------------------------------------------------------
# diagnostics that need a model


def noise_sweep(model, dataset, sigmas: Sequence[float], seed: int = 0, flip_test: bool = True,
                scale_mm: float = 1000.0) -> list[tuple[float, float]]:
    """(sigma, MPJPE(noisy) - MPJPE(clean)) for pixel noise added to the clean 2D inputs."""
    from .training import predict_mm

    root = dataset.skeleton.root
    clean = mpjpe(predict_mm(model, dataset, flip_test=flip_test, scale_mm=scale_mm), dataset.pose3d_mm, root)
    rng = Rng(seed).child("noise_sweep")
    rows = []
    for sigma in sigmas:
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        if sigma == 0:
            rows.append((float(sigma), 0.0))
            continue
        noisy = dataset.pose2d_px + sigma * rng.child(f"sigma{float(sigma)!r}").normal(dataset.pose2d_px.shape)
        pred = predict_mm(model, dataset, noisy, flip_test=flip_test, scale_mm=scale_mm)
        rows.append((float(sigma), mpjpe(pred, dataset.pose3d_mm, root) - clean))
    return rows


def _quantile_bins(x: np.ndarray, bins: int) -> np.ndarray:
    ranks = np.argsort(np.argsort(x, kind="stable"), kind="stable")
    return (ranks * bins) // len(x)


def binned_mi(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Plug-in mutual information (nats) on equal-frequency bins, Miller-Madow corrected."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n = len(a)
    if n != len(b) or n == 0:
        raise ValueError("samples must be nonempty and paired")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    ia, ib = _quantile_bins(a, bins), _quantile_bins(b, bins)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ia, ib), 1.0)
    pxy = joint / n
    px, py = pxy.sum(1), pxy.sum(0)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px[:, None] * py[None, :])[nz])).sum())
    correction = (nz.sum() - (px > 0).sum() - (py > 0).sum() + 1) / (2.0 * n)
    return max(mi - correction, 0.0)


def projected_mi(f2d: np.ndarray, fd: np.ndarray, rng: Rng, projections: int = 64, bins: int = 32) -> float:
    """Average MI between random 1-D projections of paired token features (N, C)."""
    x = np.asarray(f2d, dtype=np.float64).reshape(-1, f2d.shape[-1])
    y = np.asarray(fd, dtype=np.float64).reshape(-1, fd.shape[-1])
    if np.all(np.ptp(x, axis=0) == 0) or np.all(np.ptp(y, axis=0) == 0):
        log.warning("constant features; mutual information reported as 0")
        return 0.0
    dirs_x = rng.child("x").normal((projections, x.shape[1]))
    dirs_y = rng.child("y").normal((projections, y.shape[1]))
    px = x @ dirs_x.T
    py = y @ dirs_y.T
    return float(np.mean([binned_mi(px[:, k], py[:, k], bins) for k in range(projections)]))


def mutual_information_probe(model, dataset, seed: int = 0, projections: int = 64, bins: int = 32,
                             batch_size: int = 64) -> list[float]:
    """Per-layer MI between 2D and depth token features, divided by the final (decoder) value."""
    import torch

    from .tensor_core import DTYPE

    x_all = dataset.inputs()
    per_layer: list[list[tuple[np.ndarray, np.ndarray]]] = []
    with torch.no_grad():
        for start in range(0, len(x_all), batch_size):
            x = torch.from_numpy(x_all[start:start + batch_size]).to(DTYPE)
            for i, (a, b) in enumerate(model.streams(x)):
                if len(per_layer) <= i:
                    per_layer.append([])
                per_layer[i].append((a.numpy().reshape(-1, a.shape[-1]), b.numpy().reshape(-1, b.shape[-1])))
    if per_layer and per_layer[0] and sum(len(a) for a, _ in per_layer[0]) < 1000:
        log.warning("fewer than 1000 token samples; MI estimates are unreliable")
    rng = Rng(seed).child("mi_probe")
    raw = [projected_mi(np.concatenate([a for a, _ in chunks]), np.concatenate([b for _, b in chunks]), rng,
                        projections, bins) for chunks in per_layer]
    return normalize_curve(raw)


def normalize_curve(values: Sequence[float]) -> list[float]:
    ref = values[-1] if len(values) else 0.0
    if ref <= 0:
        log.warning("reference MI is zero; curve left unnormalized")
        return [float(v) for v in values]
    return [float(v) / ref for v in values]
