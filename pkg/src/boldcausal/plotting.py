"""Static figures: coupling heatmaps, FLOPs scaling and training curves."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def normalize_for_display(W) -> np.ndarray:
    """Scale by the largest magnitude into [-1, 1]; an all-zero matrix stays zero."""
    W = np.asarray(W, dtype=float)
    peak = np.abs(W).max() if W.size else 0.0
    return W / peak if peak > 0 else W.copy()


def coupling_heatmaps(path, matrices: dict, labels=None, title: str | None = None) -> None:
    """Side-by-side heatmaps on a zero-centred diverging scale (rows are sources)."""
    names = list(matrices)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.0), squeeze=False)
    for ax, name in zip(axes[0], names):
        M = normalize_for_display(matrices[name])
        im = ax.imshow(M, cmap="RdBu_r", vmin=-1.0, vmax=1.0)
        n = M.shape[0]
        ticks = labels if labels is not None else [str(k) for k in range(n)]
        ax.set_xticks(range(n), ticks)
        ax.set_yticks(range(n), ticks)
        ax.set_xlabel("target")
        ax.set_ylabel("source")
        ax.set_title(name)
        for i in range(n):
            for j in range(n):
                ax.text(j, i, f"{M[i, j]:.2f}", ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path)
    plt.close(fig)


def flops_figure(path, ns, totals) -> None:
    ns, totals = np.asarray(ns), np.asarray(totals, dtype=float)
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    ax.plot(ns, totals / 1e6, "o-")
    ax.set_xlabel("number of ROIs")
    ax.set_ylabel("MFLOPs per forward pass")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def training_curves(path, rows: list[dict]) -> None:
    """Train and validation totals per stage against a running epoch index."""
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    offset = 0
    for stage in sorted({r["stage"] for r in rows}):
        sr = [r for r in rows if r["stage"] == stage]
        x = offset + np.arange(len(sr))
        ax.semilogy(x, [float(r["train_total"]) for r in sr], label=f"stage {stage} train")
        ax.semilogy(x, [float(r["val_total"]) for r in sr], "--", label=f"stage {stage} val")
        offset += len(sr)
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
