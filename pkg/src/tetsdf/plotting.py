"""Matplotlib figures for fit reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .render.raster import NormalMap  # noqa: E402


def plot_loss_curves(report, path) -> None:
    """Per-term loss, total loss and silhouette mismatch against iteration."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    it = np.arange(len(report.total))
    for name, series in report.terms.items():
        s = np.asarray(series)
        if np.any(s > 0):
            ax0.semilogy(it, np.maximum(s, 1e-16), label=name)
    ax0.semilogy(it, np.maximum(report.total, 1e-16), "k", lw=2, label="total")
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("weighted loss")
    ax0.legend(fontsize=8)
    ax1.plot(it, report.mismatch)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("silhouette mismatch (pixels)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _rgb(nm: NormalMap) -> np.ndarray:
    img = 0.5 * (nm.normals + 1.0)
    img[~nm.mask] = 0.0
    return np.clip(img, 0.0, 1.0)


def plot_view_panel(pred: NormalMap, target: NormalMap, path, title: str = "") -> None:
    """Target, prediction and per-pixel angular error side by side."""
    dot = np.clip(np.einsum("hwc,hwc->hw", pred.normals, target.normals), -1.0, 1.0)
    err = np.degrees(np.arccos(dot))
    err[pred.mask ^ target.mask] = 180.0
    err[~(pred.mask | target.mask)] = np.nan
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.8), layout="constrained")
    axes[0].imshow(_rgb(target))
    axes[0].set_title("target")
    axes[1].imshow(_rgb(pred))
    axes[1].set_title("fit")
    im = axes[2].imshow(err, cmap="magma", vmin=0, vmax=45)
    axes[2].set_title("angular error (deg)")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.set_axis_off()
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)
