"""Report figures written next to the CSV tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _figure(width=4.5, height=3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        # Fixed metadata keeps PNG bytes reproducible.
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_axis_mpjpe(per_axis: dict, total: float, path) -> Path:
    fig, ax = _figure(3.5, 3.0)
    names = ["x", "y", "z"]
    ax.bar(names, [per_axis[k] for k in names], color=["#4c72b0", "#55a868", "#c44e52"])
    ax.axhline(total, color="k", lw=0.8, ls="--", label=f"MPJPE {total:.1f}")
    ax.set_ylabel("mean abs. error (mm)")
    ax.set_title("Error by axis")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_noise_sweep(sigmas, mean, std, path) -> Path:
    fig, ax = _figure()
    ax.errorbar(sigmas, mean, yerr=std, marker="o", capsize=3)
    ax.set_xlabel("2D noise sigma (px)")
    ax.set_ylabel(r"$\Delta$MPJPE (mm)")
    ax.set_title("Robustness to noisy 2D input")
    return _save(fig, path)


def plot_mi_curve(values, path, encoder_layers: int | None = None) -> Path:
    fig, ax = _figure()
    layers = np.arange(1, len(values) + 1)
    ax.plot(layers, values, marker="o")
    if encoder_layers is not None and encoder_layers < len(values):
        ax.axvspan(encoder_layers + 0.5, len(values) + 0.5, color="0.9", label="decoder")
        ax.legend(frameon=False)
    ax.set_xlabel("layer")
    ax.set_ylabel("normalized MI")
    ax.set_ylim(0, max(1.05, float(np.max(values)) * 1.05) if len(values) else 1.05)
    ax.set_title("2D / depth feature mutual information")
    return _save(fig, path)


def plot_reprojection(input_err, pred_err, gt_err, path) -> Path:
    fig, ax = _figure(5.0, 3.0)
    frames = np.arange(len(input_err))
    ax.plot(frames, input_err, label="input 2D", lw=1)
    ax.plot(frames, pred_err, label="reprojected prediction", lw=1)
    ax.plot(frames, gt_err, label="reprojected ground truth", lw=1, ls=":")
    ax.set_xlabel("frame (all sequences)")
    ax.set_ylabel("error vs true 2D (px)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_training_curve(records, path) -> Path:
    fig, ax = _figure()
    train = [(r["step"], r["train_loss"]) for r in records if "train_loss" in r]
    val = [(r["step"], r["val_mpjpe"]) for r in records if "val_mpjpe" in r]
    if train:
        ax.plot(*zip(*train), label="train loss", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("train loss")
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), color="#c44e52", marker=".", label="val MPJPE")
        ax2.set_ylabel("val MPJPE (mm)")
    return _save(fig, path)
