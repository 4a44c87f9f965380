"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(losses, path: Path, smooth: int = 25) -> Path:
    steps = np.array([r[0] for r in losses])
    vals = np.array([r[2] for r in losses], dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.semilogy(steps, vals, lw=0.6, color="0.7", label="per step")
        if len(vals) >= smooth:
            kernel = np.ones(smooth) / smooth
            ax.semilogy(steps[smooth - 1:], np.convolve(vals, kernel, mode="valid"), lw=1.2,
                        color="C0", label=f"{smooth}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("MSE")
        ax.legend(frameon=False)
        return _save(fig, path)


def metrics_bars(scores, path: Path) -> Path:
    names = [s.view.removesuffix(".png") for s in scores]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.6 * len(names) + 1.5), 3))
        ax.bar(x - 0.2, [s.psnr for s in scores], 0.4, label="model")
        ax.bar(x + 0.2, [s.bicubic_psnr for s in scores], 0.4, label="bicubic")
        ax.set_xticks(x, names, rotation=45, ha="right")
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False)
        return _save(fig, path)


def comparison_panel(gt: np.ndarray, bicubic: np.ndarray, pred: np.ndarray, path: Path,
                     title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7, 2.6))
        for ax, img, label in zip(axes, (gt, bicubic, pred), ("HR", "bicubic", "model")):
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_title(label)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def ablation_bars(rows, path: Path) -> Path:
    labels = [r["method"] for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.bar(x - 0.2, [r["psnr"] for r in rows], 0.4, label="train views")
        ax.bar(x + 0.2, [r["test_psnr"] for r in rows], 0.4, label="test views")
        ax.set_xticks(x, labels)
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False)
        return _save(fig, path)
