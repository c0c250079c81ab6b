"""Matplotlib renderings written next to the PPM/PGM exports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.linewidth": 0.5,
    "figure.dpi": 150,
})


def _gray(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0).mean(axis=0)


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0).transpose(1, 2, 0)


def save_fig(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def attribution_figure(maps: np.ndarray, lr: np.ndarray, t_ref: int, path,
                       labels: np.ndarray | None = None) -> Path:
    """One column per LR frame: heat map over the grayscale frame, with
    optional instance-label contours."""
    T = maps.shape[0]
    fig, axes = plt.subplots(1, T, figsize=(1.6 * T, 1.8), squeeze=False)
    for t, ax in enumerate(axes[0]):
        ax.imshow(_gray(lr[t]), cmap="gray", vmin=0, vmax=1)
        ax.imshow(maps[t], cmap="inferno", alpha=0.65, vmin=0, vmax=1)
        if labels is not None and labels[t].max() > 0:
            ax.contour(labels[t], levels=np.arange(0.5, labels[t].max() + 1), colors="c", linewidths=0.4)
        ax.set_title("reference" if t == t_ref else f"frame {t}")
        ax.set_xticks([])
        ax.set_yticks([])
    return save_fig(fig, path)


def comparison_figure(bicubic: np.ndarray, sr: np.ndarray, hr: np.ndarray | None, path,
                      scores: dict[str, str] | None = None) -> Path:
    panels = [("bicubic", bicubic), ("model", sr)]
    if hr is not None:
        panels.append(("ground truth", hr))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4), squeeze=False)
    for ax, (name, img) in zip(axes[0], panels):
        ax.imshow(_rgb(img))
        title = name if not scores or name not in scores else f"{name}\n{scores[name]}"
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    return save_fig(fig, path)


def attention_figure(attn: np.ndarray, path, titles: list[str] | None = None) -> Path:
    """(K, H, W) attention maps of pixels onto K tokens."""
    K = attn.shape[0]
    fig, axes = plt.subplots(1, K, figsize=(1.6 * K, 1.8), squeeze=False)
    for k, ax in enumerate(axes[0]):
        ax.imshow(attn[k], cmap="viridis", vmin=0, vmax=1)
        ax.set_title(titles[k] if titles else f"token {k}")
        ax.set_xticks([])
        ax.set_yticks([])
    return save_fig(fig, path)
