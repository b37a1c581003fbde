"""Figure rendering for the reporting paths.

Every CSV the command-line reports emit gets a companion PNG: the bound
curves, the training losses, and the evaluation grid. Files are written
atomically (temp then rename) like every other output.
"""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _atomic_savefig(fig, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, dpi=150, format="png")
    plt.close(fig)
    os.replace(tmp, path)


def save_bounds_figure(curve, path) -> None:
    """Lower/upper MI bounds against classifier error probability."""
    ps = np.array([s[0] for s in curve.samples])
    lower = np.array([s[1] for s in curve.samples])
    upper_ps = np.array([s[0] for s in curve.samples if s[2] is not None])
    upper = np.array([s[2] for s in curve.samples if s[2] is not None])

    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    ax.plot(upper_ps, upper, "--", color="tab:orange", label="upper bound")
    ax.plot(ps, lower, "-", color="tab:blue", label="lower bound")
    chance = 1.0 - 1.0 / curve.n_classes
    ax.plot([chance], [0.0], "ko", markersize=5)
    ax.set_xlabel("classifier error probability")
    ax.set_ylabel("mutual information (bits)")
    ax.set_title(f"speaker-information bounds, {curve.n_classes} classes")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _atomic_savefig(fig, path)


def save_training_figure(records, path) -> None:
    """Loss curves and code-classifier accuracy over training steps."""
    steps = [r.step for r in records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    ax_loss.plot(steps, [r.recon_loss for r in records], label="reconstruction L1")
    ax_loss.plot(steps, [r.classifier_loss for r in records],
                 label="classifier CE", alpha=0.8)
    ax_loss.plot(steps, [r.adversarial_term for r in records],
                 label="adversarial term", alpha=0.8)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.grid(alpha=0.3)

    ax_acc.plot(steps, [r.code_accuracy for r in records], color="tab:red")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("classifier accuracy on codes")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.grid(alpha=0.3)
    fig.tight_layout()
    _atomic_savefig(fig, path)


def save_eval_figure(report, speakers, path) -> None:
    """Centroid-shift grid plus the headline metrics."""
    n = len(speakers)
    grid = np.full((n, n), np.nan)
    for (src, tgt), shift in report.centroid_shifts.items():
        grid[speakers.index(src), speakers.index(tgt)] = shift

    fig, ax = plt.subplots(figsize=(1.2 * n + 3.0, 1.0 * n + 2.2))
    masked = np.ma.masked_invalid(grid)
    image = ax.imshow(masked, cmap="viridis", vmin=0.0, vmax=1.2)
    for i in range(n):
        for j in range(n):
            if i != j and not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                        color="white", fontsize=9)
    ax.set_xticks(range(n), speakers)
    ax.set_yticks(range(n), speakers)
    ax.set_xlabel("target speaker")
    ax.set_ylabel("source speaker")
    fig.colorbar(image, ax=ax, label="centroid shift toward target")
    ax.set_title(
        f"recon L1 {report.reconstruction_l1:.4f} | "
        f"code error {report.code_classifier_error:.3f} | "
        f"MI lower {report.mi_lower_bits:.3f} bits")
    fig.tight_layout()
    _atomic_savefig(fig, path)
