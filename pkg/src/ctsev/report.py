"""Figure rendering for the CLI report paths.

Every delimited output the CLI writes (training log, ablation table,
evaluation metrics) gets a matplotlib figure saved next to it. Rendering is
headless (Agg) and file-based only.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_training_curves(results, path: str | Path) -> None:
    """Loss and validation severity AUC per epoch, one line per (split, variant)."""
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(10, 4))
    for res in results:
        for variant in ("A", "B"):
            rows = [r for r in res.history if r.variant == variant]
            if not rows:
                continue
            epochs = [r.epoch + 1 for r in rows]
            label = f"split{res.split_index + 1}/{variant}"
            ax_loss.plot(epochs, [r.loss for r in rows], label=label, alpha=0.7)
            ax_auc.plot(epochs, [r.auc_severity for r in rows], label=label, alpha=0.7)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_auc.set_xlabel("epoch")
    ax_auc.set_ylabel("val AUC (severity)")
    ax_auc.set_ylim(0.0, 1.05)
    if ax_loss.get_legend_handles_labels()[0]:
        ax_loss.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_ablation_chart(rows: Sequence[Mapping], path: str | Path) -> None:
    """Grouped bars: validation severity AUC per augmentation set and variant."""
    names = [str(r["aug_set"]) for r in rows]
    a = [float(r["auc_severity_a"]) for r in rows]
    b = [float(r["auc_severity_b"]) for r in rows]
    x = np.arange(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(x - width / 2, a, width, label="variant A")
    ax.bar(x + width / 2, b, width, label="variant B")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("val AUC (severity)")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def _roc_points(labels: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="mergesort")
    labels = labels[order]
    tp = np.concatenate([[0], np.cumsum(labels == 1)])
    fp = np.concatenate([[0], np.cumsum(labels == 0)])
    return fp / max(fp[-1], 1), tp / max(tp[-1], 1)


def save_roc_curves(curves: Mapping[str, tuple[Sequence[int], Sequence[float]]], path: str | Path) -> None:
    """One ROC curve per named (labels, scores) pair."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (labels, scores) in curves.items():
        fpr, tpr = _roc_points(np.asarray(labels), np.asarray(scores, dtype=np.float64))
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
