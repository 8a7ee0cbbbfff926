"""Figure rendering for the report path: curves, overlays, heat maps."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image, ImageDraw

from .evaluation import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS

PRED_COLOR = (0, 220, 60)     # green
GT_COLOR = (255, 105, 180)    # pink


def save_precision_plot(curves, path):
    """curves: {label: (values, dp20)} over the 0..50 px thresholds."""
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for label, (values, dp20) in sorted(curves.items(),
                                        key=lambda kv: -kv[1][1]):
        ax.plot(PRECISION_THRESHOLDS, values, label=f"{label} [{dp20:.3f}]")
    ax.set_xlabel("center error threshold (px)")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 50)
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_success_plot(curves, path):
    """curves: {label: (values, auc)} over the 21 overlap thresholds."""
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for label, (values, auc) in sorted(curves.items(),
                                       key=lambda kv: -kv[1][1]):
        ax.plot(SUCCESS_THRESHOLDS, values, label=f"{label} [{auc:.3f}]")
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel("success rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _draw_box(draw, box, color, width=2):
    draw.rectangle([box.x, box.y, box.x + box.w, box.y + box.h],
                   outline=color, width=width)


def save_overlay(frame, pred_box, gt_box, path):
    """Frame with the predicted (green) and ground-truth (pink) boxes."""
    arr = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(arr.transpose(1, 2, 0))
    draw = ImageDraw.Draw(img)
    if gt_box is not None:
        _draw_box(draw, gt_box, GT_COLOR)
    _draw_box(draw, pred_box, PRED_COLOR)
    img.save(path)


def save_heatmap(positive_map, path):
    """Min-max normalized grayscale image of a score map."""
    m = np.asarray(positive_map, dtype=np.float64)
    lo, hi = m.min(), m.max()
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(norm, cmap="gray", vmin=0.0, vmax=1.0)
    ax.set_axis_off()
    fig.tight_layout(pad=0.1)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_plot(losses, path, ylabel="loss"):
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(np.arange(1, len(losses) + 1), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
