"""Matplotlib figures written next to the tab-separated / JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FONTSIZE = 9
PAGEWIDTH = 10  # inches

# fixed metadata keeps PNG bytes reproducible
PNG_METADATA = {"Software": None}


def init_plt():
    matplotlib.rcParams.update(
        {
            "font.size": FONTSIZE,
            "axes.titlesize": FONTSIZE,
            "axes.labelsize": FONTSIZE,
            "xtick.labelsize": FONTSIZE - 1,
            "ytick.labelsize": FONTSIZE - 1,
            "legend.fontsize": FONTSIZE - 1,
            "figure.dpi": 100,
            "savefig.dpi": 120,
            "axes.grid": True,
            "grid.color": "0.9",
            "axes.spines.top": False,
            "axes.spines.right": False,
            "svg.hashsalt": "inkfuse",
        }
    )


def savefig(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=PNG_METADATA, bbox_inches="tight")
    plt.close(fig)
    return path


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_loss_curves(rows: Sequence[dict], path: str | Path, window: int = 20) -> Path:
    """Two panels: critic losses (every iteration) and generator losses (G iterations)."""
    init_plt()
    fig, (ax_c, ax_g) = plt.subplots(1, 2, figsize=(PAGEWIDTH, PAGEWIDTH * 0.35))
    for ax, keys, title in (
        (ax_c, ("d_loss", "tr_real", "wcn_real"), "critic update"),
        (ax_g, ("g_adv", "tr_fake", "wcn_fake", "g_total"), "generator update"),
    ):
        for key in keys:
            pts = [(r["iteration"], r[key]) for r in rows if r.get(key) is not None]
            if not pts:
                continue
            it, val = np.asarray(pts, dtype=float).T
            sm = _smooth(val, window)
            ax.plot(it[len(it) - len(sm):], sm, label=key, lw=1.2)
        ax.set_title(title)
        ax.set_xlabel("iteration")
        ax.set_yscale("symlog", linthresh=1.0)
        ax.legend(frameon=False)
    return savefig(fig, path)


def plot_attention_maps(style_images: Sequence[np.ndarray], maps: np.ndarray, mai: np.ndarray,
                        word: str, path: str | Path) -> Path:
    """Rows: style images, attention heatmap overlay, ink-masked attention."""
    init_plt()
    n = len(style_images)
    fig, axes = plt.subplots(3, n, figsize=(PAGEWIDTH, PAGEWIDTH * 0.62), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(style_images[i])
        axes[1, i].imshow(style_images[i])
        axes[1, i].imshow(maps[i], cmap="magma", alpha=0.55, vmin=0, vmax=1)
        axes[2, i].imshow(mai[i], cmap="magma", vmin=0, vmax=1)
        axes[0, i].set_title(f"style {i}")
        for ax in axes[:, i]:
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
    axes[0, 0].set_ylabel("style")
    axes[1, 0].set_ylabel("attention")
    axes[2, 0].set_ylabel("masked on ink")
    fig.suptitle(f"cross-attention for '{word}'")
    return savefig(fig, path)


def plot_feature_scatter(real: np.ndarray, generated: np.ndarray, path: str | Path, title: str = "") -> Path:
    """First two principal components of real vs generated features."""
    init_plt()
    both = np.concatenate([real, generated]).astype(np.float64)
    centred = both - both.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:2]
    # sign convention so reruns give identical figures
    comps = comps * np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])[:, None]
    proj = centred @ comps.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    fig, ax = plt.subplots(figsize=(PAGEWIDTH * 0.45, PAGEWIDTH * 0.4))
    ax.scatter(*proj[: len(real)].T, s=12, label="real", alpha=0.8)
    ax.scatter(*proj[len(real):].T, s=12, marker="x", label="generated", alpha=0.8)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(title)
    ax.legend(frameon=False)
    return savefig(fig, path)


def save_word_strip(images: Sequence[np.ndarray], path: str | Path, labels: Sequence[str] = ()) -> Path:
    """Generated words stacked vertically, for quick visual inspection."""
    init_plt()
    n = max(len(images), 1)
    fig, axes = plt.subplots(n, 1, figsize=(PAGEWIDTH * 0.5, 0.6 * n + 0.4), squeeze=False)
    for i, im in enumerate(images):
        ax = axes[i, 0]
        ax.imshow(im, cmap="gray", vmin=0, vmax=255)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.grid(False)
        if i < len(labels):
            ax.set_ylabel(labels[i], rotation=0, ha="right", va="center")
    return savefig(fig, path)
