"""PNG figures for run reports (Agg backend, no embedded timestamps)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def training_curve(history, path) -> Path:
    epochs = [r.epoch for r in history.records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(epochs, [r.nll for r in history.records], marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean NLL per demonstration")
    ax2.semilogy(epochs, [r.lr for r in history.records], color="tab:orange")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    return _save(fig, path)


def saliency_strip(frames: Sequence[np.ndarray], predicted: Sequence, truth: Sequence, path,
                   title: str = "") -> Path:
    """Per frame: the first feature channel, the ground-truth map and the prediction."""
    T = len(predicted)
    fig, axes = plt.subplots(3, T, figsize=(1.9 * T, 4.6), squeeze=False)
    rows = (("scene", frames), ("human", [m.values for m in truth]), ("model", [m.values for m in predicted]))
    for i, (label, images) in enumerate(rows):
        for t in range(T):
            ax = axes[i, t]
            ax.imshow(images[t], cmap="gray" if i == 0 else "inferno", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if t == 0:
                ax.set_ylabel(label)
            if i == 0:
                ax.set_title(f"frame {t}", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(aggregate: dict, path, title: str = "") -> Path:
    names = [k for k, v in aggregate.items() if v is not None]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(names, [aggregate[k] for k in names], color="tab:blue")
    for i, k in enumerate(names):
        ax.annotate(f"{aggregate[k]:.3f}", (i, aggregate[k]), ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("mean over frames")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def scanpath_plot(background: np.ndarray, points, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.imshow(background, cmap="gray", interpolation="nearest")
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    ax.plot(xs, ys, "-", color="tab:cyan", lw=1)
    ax.scatter(xs, ys, c=np.arange(len(xs)), cmap="viridis", s=18, zorder=3)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
