"""Matplotlib figures written next to the CLI's numeric outputs.

Everything renders off-screen (Agg) to PNG files; nothing here feeds back
into training or evaluation.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_DPI = 110


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(records: Sequence[dict], path) -> Path:
    """Training loss and validation Dice per epoch on twin axes."""
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.plot(epochs, [r["train_loss"] for r in records], color="tab:red", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("soft Dice loss", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["val_dice"] for r in records], color="tab:blue", label="val Dice")
    ax2.set_ylabel("validation Dice", color="tab:blue")
    ax2.set_ylim(0, 1)
    ax.spines["top"].set_visible(False)
    ax2.spines["top"].set_visible(False)
    return _save(fig, path)


def metrics_figure(summary: dict, dice: dict, assd: dict, path) -> Path:
    """Per-class Dice and ASSD distributions as box plots."""
    classes = sorted(dice, key=int)
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    axes[0].boxplot([100 * np.asarray(dice[k]) for k in classes])
    axes[0].set_xticks(range(1, len(classes) + 1), [str(k) for k in classes])
    axes[0].set_title("Dice (%)")
    defined = [[v for v in assd[k] if v is not None] for k in classes]
    keep = [i for i, v in enumerate(defined) if v]
    if keep:
        axes[1].boxplot([defined[i] for i in keep])
        axes[1].set_xticks(range(1, len(keep) + 1), [str(classes[i]) for i in keep])
    axes[1].set_title("ASSD (pix)")
    for ax in axes:
        ax.set_xlabel("class")
    return _save(fig, path)


def explain_panel(image: np.ndarray, mask: np.ndarray, spatial: dict[str, np.ndarray],
                  channel: dict[str, np.ndarray], scale_maps: np.ndarray | None,
                  gamma: np.ndarray | None, path) -> Path:
    """One figure with the input, prediction and every exported attention map.

    ``image`` is H×W or C×H×W, ``spatial`` maps names to H×W arrays in [0,1],
    ``channel`` maps names to 1-D β vectors and ``scale_maps`` is K×H×W.
    """
    rows: list[list[tuple[str, np.ndarray, str]]] = []
    img = image if image.ndim == 2 else np.moveaxis(image, 0, -1).squeeze()
    rows.append([("input", img, "gray"), ("prediction", mask, "viridis")])
    if spatial:
        rows.append([(k, v, "jet") for k, v in spatial.items()])
    if scale_maps is not None:
        rows.append([(f"scale {i + 1}", m, "jet") for i, m in enumerate(scale_maps)])
    ncols = max(max(len(r) for r in rows), 2)
    nrows = len(rows) + (1 if channel else 0)
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.2 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for r, row in enumerate(rows):
        for c, (title, arr, cmap) in enumerate(row):
            vmax = 1.0 if cmap == "jet" else None
            axes[r, c].imshow(arr, cmap=cmap, vmin=0.0 if vmax else None, vmax=vmax)
            axes[r, c].set_title(title, fontsize=8)
    if channel:
        ax = fig.add_subplot(nrows, 1, nrows)
        for name, beta in channel.items():
            ax.plot(np.arange(len(beta)) / max(len(beta) - 1, 1), beta, label=name, lw=1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("relative channel index")
        ax.set_ylabel("β")
        ax.legend(fontsize=7, ncol=len(channel))
    if gamma is not None:
        fig.suptitle("γ = " + ", ".join(f"{g:.3f}" for g in np.ravel(gamma)), fontsize=9)
    return _save(fig, path)
