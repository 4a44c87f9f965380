"""Metric tables for renders, the bicubic baseline and ablation sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SceneDataset, psnr, read_image, ssim, upsample_bicubic
from .model import Model, ViewCache, render_view

METRIC_COLUMNS = ["view", "psnr", "ssim", "bicubic_psnr", "bicubic_ssim"]
ABLATION_COLUMNS = ["method", "psnr", "ssim", "lpips", "test_psnr", "test_ssim", "seed", "steps"]
ABLATION_LABELS = {"no_gcam": "w/o G_cam", "no_gcnn": "w/o G_CNN", "no_gfuse": "w/o G_fuse", "none": "full"}


@dataclass
class ViewScore:
    view: str
    psnr: float
    ssim: float
    bicubic_psnr: float
    bicubic_ssim: float


def render_name(split: str, j: int) -> str:
    return f"{split}_{j:03d}.png"


def bicubic_baseline(ds: SceneDataset, i: int) -> np.ndarray:
    v = ds.views[i]
    return upsample_bicubic(v.lr_image, v.scale)


def score_image(name: str, pred: np.ndarray, ds: SceneDataset, i: int) -> ViewScore:
    hr = ds.views[i].hr_image
    if hr is None:
        raise ValueError(f"view {name} has no HR ground truth to score against")
    base = bicubic_baseline(ds, i)
    return ViewScore(name, psnr(pred, hr), ssim(pred, hr), psnr(base, hr), ssim(base, hr))


def score_renders(renders_dir: Path, ds: SceneDataset, split: str) -> tuple[list[ViewScore], list[str]]:
    """Score every render of a split; returns (scores, missing file names)."""
    renders_dir = Path(renders_dir)
    scores, missing = [], []
    for j, i in enumerate(ds.indices(split)):
        name = render_name(split, j)
        path = renders_dir / name
        if not path.exists():
            missing.append(name)
            continue
        scores.append(score_image(name, read_image(path), ds, i))
    return scores, missing


def score_model(model: Model, cache: ViewCache, ds: SceneDataset, split: str) -> list[ViewScore]:
    return [score_image(render_name(split, j), render_view(model, cache, i), ds, i)
            for j, i in enumerate(ds.indices(split))]


def mean_score(scores: list[ViewScore]) -> ViewScore:
    return ViewScore("mean", *(float(np.mean([getattr(s, k) for s in scores])) for k in METRIC_COLUMNS[1:]))


def write_metrics_csv(path: Path, scores: list[ViewScore]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for s in scores + [mean_score(scores)]:
            w.writerow([s.view] + [f"{getattr(s, k):.6f}" for k in METRIC_COLUMNS[1:]])


def read_metrics_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_ablation_csv(path: Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in ABLATION_COLUMNS})
