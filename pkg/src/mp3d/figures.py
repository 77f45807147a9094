"""Matplotlib figures rendered next to the delimited report outputs."""
from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalkit import froc_curve, pr_curve


def save_eval_figure(match, path, fp_rates=(0.5, 1.0, 2.0, 4.0)):
    """FROC and PR curves side by side for one evaluation run."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    fpi, sens = froc_curve(match.scores, match.is_tp, match.num_images, match.num_gts)
    if len(fpi):
        ax1.step(fpi, sens, where="post")
    for r in fp_rates:
        ax1.axvline(r, color="gray", lw=0.5, ls=":")
    ax1.set_xlabel("false positives per image")
    ax1.set_ylabel("sensitivity")
    ax1.set_title("FROC")
    ax1.set_ylim(0, 1.02)
    rec, prec = pr_curve(match.scores, match.is_tp, match.num_gts)
    if len(rec):
        ax2.step(rec, prec, where="post")
    ax2.set_xlabel("recall")
    ax2.set_ylabel("precision")
    ax2.set_title("Precision-recall (IoU 0.5)")
    ax2.set_xlim(0, 1.02)
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_profile_figure(rows, path):
    """Compute cost versus slice count, one line per variant.

    rows: iterable of (variant, slices, params, flops, gflops)."""
    by_variant = {}
    for variant, slices, _, _, gflops in rows:
        by_variant.setdefault(variant, []).append((slices, gflops))
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant, pts in sorted(by_variant.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=variant)
    ax.set_xlabel("input slices")
    ax.set_ylabel("GFLOPs")
    ax.set_title("Compute cost vs. slice count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(histories, path, smooth=20):
    """Training loss curves; histories: {label: [(step, cls, reg, total), ...]}."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in sorted(histories.items()):
        steps = [r[0] for r in rows]
        total = np.asarray([r[3] for r in rows], dtype=np.float64)
        if smooth > 1 and len(total) > smooth:
            kernel = np.ones(smooth) / smooth
            total = np.convolve(total, kernel, mode="valid")
            steps = steps[smooth - 1:]
        ax.plot(steps, total, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss (smoothed)")
    ax.set_title("Training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
