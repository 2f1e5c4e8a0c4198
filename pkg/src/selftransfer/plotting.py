"""Matplotlib figures written next to the CSV outputs.

All figures use the Agg backend and carry no timestamp metadata, so the
same inputs give byte-identical PNG files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_pr_curves(pr_cls, pr_loc, path, title=""):
    """Precision/recall for classification and (if given) localization."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for points, label in ((pr_cls, "classification"), (pr_loc, "localization")):
        if not points:
            continue
        prec = [p for _, p, _ in points]
        rec = [r for _, _, r in points]
        ax.step([0.0] + rec, [prec[0]] + prec, where="post", label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_training_curves(records, path, title=""):
    epochs = [r.epoch for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r.loss_total for r in records], label="total")
    ax1.plot(epochs, [r.loss_cls for r in records], label="classifier", alpha=0.7)
    ax1.plot(epochs, [r.loss_loc for r in records], label="localizer", alpha=0.7)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r.val_acc_cls for r in records], label="val classifier")
    ax2.plot(epochs, [r.val_acc_loc for r in records], label="val localizer")
    ax2.plot(epochs, [r.alpha for r in records], "k:", label="alpha")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1.02)
    ax2.legend(loc="lower right")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_score_map(image, scaled_map, peak, boxes, path, title=""):
    """Image with the upsampled score map overlaid, ground-truth boxes and peak."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    ax.imshow(scaled_map, cmap="jet", alpha=0.4, vmin=0, vmax=255)
    for x0, y0, x1, y1 in boxes or []:
        ax.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0,
                                   fill=False, edgecolor="lime", linewidth=1.5))
    if peak is not None:
        ax.plot(peak[0], peak[1], "w+", markersize=12, markeredgewidth=2)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def plot_suite(summary_rows, runs, path):
    """Grouped bars of median metrics per variant with per-seed points."""
    metrics = ("accuracy", "auc", "ap_pos", "ap_neg", "loc_ap")
    variants = [row["variant"] for row in summary_rows]
    width = 0.8 / len(variants)
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(metrics))
    for i, variant in enumerate(variants):
        medians = [float(summary_rows[i][m]) for m in metrics]
        pos = x + (i - (len(variants) - 1) / 2) * width
        ax.bar(pos, medians, width, label=variant)
        for j, m in enumerate(metrics):
            vals = [float(r[m]) for r in runs if r["variant"] == variant]
            ax.plot([pos[j]] * len(vals), vals, "k.", markersize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics)
    lows = [float(r[m]) for r in runs for m in metrics]
    ax.set_ylim(max(0.0, min(lows) - 0.05), 1.005)
    ax.legend(loc="lower left", fontsize=8)
    ax.set_title("median over seeds (dots: individual runs)")
    fig.tight_layout()
    _save(fig, path)
