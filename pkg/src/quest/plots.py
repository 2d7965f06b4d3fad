"""Figure rendering for the report paths: every CSV the CLI emits gets a
matching PNG next to it. Uses the Agg backend; nothing here opens windows."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_drift_curves(curves: dict, path) -> Path:
    """Per-frame mean error curves, one line per method.

    ``curves`` maps method name -> (mean, std) arrays (std may be None).
    """
    fig, ax = plt.subplots(figsize=(6.2, 4.0))
    for method, (mean, std) in curves.items():
        frames = np.arange(len(mean))
        ax.plot(frames, mean, label=method, linewidth=1.6)
        if std is not None:
            ax.fill_between(frames, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("frame")
    ax.set_ylabel("mean 3D error [m]")
    ax.set_title("drift accumulation")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def save_metric_bars(rows: list[dict], metric: str, path, group_by: str = "method",
                     label_by: str = "level") -> Path:
    """Grouped bars of one metric from report rows."""
    fig, ax = plt.subplots(figsize=(6.2, 4.0))
    groups = sorted({str(r[group_by]) for r in rows})
    labels = sorted({str(r[label_by]) for r in rows})
    width = 0.8 / max(len(groups), 1)
    for gi, group in enumerate(groups):
        xs, ys = [], []
        for li, label in enumerate(labels):
            match = [r for r in rows
                     if str(r[group_by]) == group and str(r[label_by]) == label]
            if match:
                xs.append(li + gi * width)
                ys.append(float(match[0][metric]))
        ax.bar(xs, ys, width=width, label=group)
    ax.set_xticks(np.arange(len(labels)) + 0.4 - width / 2)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_xlabel(label_by)
    ax.set_ylabel(metric)
    ax.set_title(metric)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def save_training_curves(log_rows: list[dict], path) -> Path:
    """Loss components and validation total over epochs."""
    fig, ax = plt.subplots(figsize=(6.2, 4.0))
    epochs = [r["epoch"] for r in log_rows]
    for key in ("aff", "vel", "acc", "manifold", "conf", "feat", "flow"):
        values = [r[key] for r in log_rows]
        if any(v != 0 for v in values):
            ax.plot(epochs, values, label=key, linewidth=1.2)
    ax.plot(epochs, [r["total"] for r in log_rows], label="total",
            linewidth=1.8, color="black")
    ax.plot(epochs, [r["val_total"] for r in log_rows], label="val_total",
            linewidth=1.8, linestyle="--", color="gray")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)
