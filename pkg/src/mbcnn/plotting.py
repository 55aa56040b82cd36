"""Report figures written to files: training curves, per-pair scores, passband grids."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dct import passband_grid  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def training_curves(history, path) -> Path:
    """Validation PSNR and learning rate per epoch."""
    epochs = [e.epoch for e in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [e.val_psnr for e in history], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("validation PSNR (dB)")
    ax2.semilogy(epochs, [e.lr for e in history], drawstyle="steps-post")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    return _save(fig, path)


def eval_scores(ids: Sequence[str], input_psnr: Sequence[float], output_psnr: Sequence[float],
                path) -> Path:
    """Grouped bars of input and restored PSNR for each pair."""
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(ids) + 2), 3.5))
    ax.bar(x - 0.2, input_psnr, width=0.4, label="moire input")
    ax.bar(x + 0.2, output_psnr, width=0.4, label="restored")
    ax.set_xticks(x)
    ax.set_xticklabels(ids, rotation=90, fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    ax.legend(loc="best")
    return _save(fig, path)


def passband_overview(passbands: Dict[str, np.ndarray], path) -> Path:
    """One heat map per learnable bandpass, DC at the top-left."""
    names = list(passbands)
    cols = min(3, max(1, len(names)))
    rows = -(-len(names) // cols) or 1
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, name in zip(axes.flat, names):
        im = ax.imshow(passband_grid(passbands[name]), cmap="viridis")
        ax.set_title(name.replace("/passband", ""), fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)
