"""Figure rendering for run reports; file output only (Agg backend)."""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from pathlib import Path  # noqa: E402


def _savefig(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def loss_curve_figure(history: list[dict], path) -> str:
    it = [r["iteration"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "rgb", "lidar", "reg"):
        ax.plot(it, [max(r[key], 1e-12) for r in history], label=key, lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _savefig(fig, path)


def lidar_metrics_figure(rows: list[dict], path) -> str:
    """rows: per-frame dicts with frame, hit_rate, depth_median_l2, intensity_rmse."""
    frames = [r["frame"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key, label in zip(
            axes, ("hit_rate", "depth_median_l2", "intensity_rmse"),
            ("hit rate", "median depth error (m)", "intensity RMSE")):
        ax.plot(frames, [r[key] for r in rows], marker="o", ms=3, lw=1.0)
        ax.set_xlabel("frame")
        ax.set_title(label, fontsize=9)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _savefig(fig, path)


def clearance_figure(runs: dict, path) -> str:
    """runs: label -> list of StepRecord; plots forward clearance per step."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, records in runs.items():
        steps = [r.step for r in records]
        clearance = [min(r.clearance, 50.0) for r in records]
        ax.plot(steps, clearance, label=label, lw=1.2)
    ax.axhline(0.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("step")
    ax.set_ylabel("forward clearance (m)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _savefig(fig, path)


def image_compare_figure(sim: np.ndarray, ref: np.ndarray, path,
                         titles=("simulated", "reference")) -> str:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    axes[0].imshow(np.clip(sim, 0, 1))
    axes[0].set_title(titles[0], fontsize=9)
    axes[1].imshow(np.clip(ref, 0, 1))
    axes[1].set_title(titles[1], fontsize=9)
    diff = np.abs(np.asarray(sim) - np.asarray(ref)).mean(axis=-1)
    im = axes[2].imshow(diff, cmap="magma", vmin=0.0, vmax=max(diff.max(), 1e-6))
    axes[2].set_title("abs diff", fontsize=9)
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _savefig(fig, path)
