"""Figures written next to command outputs (matplotlib, file backend only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _floats(rows, key):
    out = []
    for r in rows:
        try:
            out.append(float(r[key]))
        except (KeyError, TypeError, ValueError):
            out.append(np.nan)
    return np.array(out)


def plot_trace(rows, path) -> Path:
    """Erasing curve: normal-tissue score, running DICE and erased area against the step index.

    The SVG output is deterministic (fixed hash salt, no timestamp)."""
    path = Path(path)
    steps = _floats(rows, "step")
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(steps, _floats(rows, "sc"), label="SC (normal score)", color="tab:blue")
    dice = _floats(rows, "dice")
    if np.isfinite(dice).any():
        ax.plot(steps, dice, label="DICE", color="tab:green")
    ax.plot(steps, _floats(rows, "erased_fraction"), label="erased area", color="tab:orange")
    ax.set_xlabel("step")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    with plt.rc_context({"svg.hashsalt": "flipseg"}):
        fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_eval(rows, path) -> Path:
    """Per-metric distributions: overlap scores in percent on the left, distances on the right."""
    path = Path(path)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7.0, 3.4))
    overlap = [_floats(rows, k) for k in ("dice", "jac")]
    ax0.boxplot([v[np.isfinite(v)] for v in overlap])
    ax0.set_xticks([1, 2], ["DICE", "JAC"])
    ax0.set_ylabel("%")
    dist = [_floats(rows, k) for k in ("hd", "asd")]
    ax1.boxplot([v[np.isfinite(v)] for v in dist])
    ax1.set_xticks([1, 2], ["HD", "ASD"])
    ax1.set_ylabel("cells")
    fig.suptitle(f"{len(rows)} images")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(epoch_rows, path) -> Path:
    path = Path(path)
    epochs = _floats(epoch_rows, "epoch")
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    axes[0].plot(epochs, _floats(epoch_rows, "mean_step_reward"))
    axes[0].set_title("mean step reward")
    axes[1].plot(epochs, _floats(epoch_rows, "flip_rate"), label="flip rate")
    axes[1].plot(epochs, _floats(epoch_rows, "mean_erased_fraction"), label="erased fraction")
    axes[1].legend(fontsize=8)
    axes[2].plot(epochs, _floats(epoch_rows, "mean_loss"))
    axes[2].set_title("loss")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
