"""Figure rendering for pipeline runs: per-stage map panels, the timing
decomposition, and training loss curves. All figures are written to files
(Agg backend); nothing is shown interactively.
"""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .inference import LN2  # noqa: E402


def render_stage_panels(stage_maps: Sequence, path: str | os.PathLike) -> None:
    """One row per stage: inferred labels, uncertainty, classifier
    probabilities, and the frontier resolution (cell side in pixels)."""
    if not stage_maps:
        return
    n = len(stage_maps)
    fig, axes = plt.subplots(n, 4, figsize=(13, 3.1 * n), squeeze=False)
    col_titles = ("inferred labels", "uncertainty (nats)",
                  "classifier p(flood)", "cell side (px)")
    for r, sm in enumerate(stage_maps):
        panels = (
            (sm["inferred"], 0.0, 1.0, "viridis"),
            (sm["uncertainty"], 0.0, LN2, "magma"),
            (sm["classifier"], 0.0, 1.0, "viridis"),
            (sm["cell_side"], 1.0, None, "cividis"),
        )
        for c, (img, vmin, vmax, cmap) in enumerate(panels):
            ax = axes[r][c]
            im = ax.imshow(img, vmin=vmin, vmax=vmax, cmap=cmap,
                           interpolation="nearest")
            fig.colorbar(im, ax=ax, fraction=0.046)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(col_titles[c], fontsize=10)
        axes[r][0].set_ylabel(sm["name"], fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_timing(stages: Sequence, path: str | os.PathLike) -> None:
    """Horizontal bars of wall time per stage, inference vs training."""
    rows = [s for s in stages if "inference_seconds" in s or "training_seconds" in s]
    if not rows:
        return
    names = [s["stage"] for s in rows]
    infer = np.array([s.get("inference_seconds", 0.0) for s in rows])
    trainv = np.array([s.get("training_seconds", 0.0) for s in rows])
    y = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(8, 0.6 * len(rows) + 1.8))
    ax.barh(y - 0.18, infer, height=0.36, label="inference", color="#3b6fb6")
    ax.barh(y + 0.18, trainv, height=0.36, label="training", color="#e08a36")
    ax.set_yticks(y)
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlabel("wall time (s)")
    ax.set_title(f"total: inference {infer.sum():.2f}s, training {trainv.sum():.2f}s")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_loss_curves(curves: Sequence, path: str | os.PathLike) -> None:
    """Overlay of per-stage training curves; curves is [(name, rows)] with
    rows of (epoch, mean loss)."""
    curves = [(name, rows) for name, rows in curves if rows]
    if not curves:
        return
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name, rows in curves:
        epochs = [e for e, _ in rows]
        losses = [l for _, l in rows]
        ax.plot(epochs, losses, label=name, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean per-cell loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_all(stage_maps: Sequence, stages: Sequence, curves: Sequence,
               figdir: str | os.PathLike) -> dict:
    os.makedirs(figdir, exist_ok=True)
    paths = {
        "levels": os.path.join(figdir, "levels.png"),
        "timing": os.path.join(figdir, "timing.png"),
        "loss": os.path.join(figdir, "loss_curves.png"),
    }
    render_stage_panels(stage_maps, paths["levels"])
    render_timing(stages, paths["timing"])
    render_loss_curves(curves, paths["loss"])
    return paths
