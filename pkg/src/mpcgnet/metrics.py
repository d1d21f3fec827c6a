"""Segmentation measures: Dice, IoU, weighted F, S-measure, E-measure, MAE.

Predictions are continuous maps in [0, 1]; ground truths are binary.  All
arithmetic is float64.  The weighted F-measure, S-measure and E-measure
follow the public MATLAB reference code of their original authors,
including its rounding and ``std`` conventions.  The one departure is
edge-replicated (not zero) padding when smoothing the weighted-F error map.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

METRIC_NAMES = ("dice", "iou", "fbw", "smeasure", "emeasure", "mae")
_EPS_MACHINE = np.finfo(np.float64).eps


@dataclass(frozen=True)
class MetricsConfig:
    tau: float = 0.5
    beta2: float = 1.0
    alpha: float = 0.5
    eps: float = 1e-8
    sigma: float = 5.0
    kernel_size: int = 7

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")


DEFAULT = MetricsConfig()


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    if pred.ndim != 2:
        raise ValueError(f"expected 2-D maps, got shape {pred.shape}")
    return pred, gt.astype(bool)


def dice_iou(pred, gt, cfg: MetricsConfig = DEFAULT) -> tuple[float, float]:
    pred, gt = _pair(pred, gt)
    p = pred > cfg.tau
    tp = float(np.sum(p & gt))
    fp = float(np.sum(p & ~gt))
    fn = float(np.sum(~p & gt))
    dice = (2 * tp + cfg.eps) / (2 * tp + fp + fn + cfg.eps)
    iou = (tp + cfg.eps) / (tp + fp + fn + cfg.eps)
    return dice, iou


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def nearest_foreground(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distance to, and flat index of, the nearest foreground pixel.

    Ties resolve to the first foreground pixel in row-major order.  Large
    images fall back to scipy's exact EDT, whose tie-breaking may differ.
    """
    h, w = gt.shape
    fg = np.flatnonzero(gt)
    if fg.size * gt.size > 4_000_000:
        dist, (iy, ix) = ndimage.distance_transform_edt(~gt, return_indices=True)
        return dist, iy * w + ix
    fy, fx = np.divmod(fg, w)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy.reshape(-1, 1) - fy) ** 2 + (xx.reshape(-1, 1) - fx) ** 2
    pick = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(d2.shape[0]), pick]).reshape(h, w)
    return dist, fg[pick].reshape(h, w)


def weighted_fmeasure(pred, gt, cfg: MetricsConfig = DEFAULT) -> float:
    pred, gt = _pair(pred, gt)
    if not gt.any():
        return 1.0 if not np.any(pred > cfg.tau) else 0.0
    err = np.abs(pred - gt)
    dist, idx = nearest_foreground(gt)
    # background errors are replaced by the error at the nearest foreground pixel
    err_t = err.copy()
    bg = ~gt
    err_t[bg] = err.reshape(-1)[idx[bg]]
    # edge-replicated borders: zero padding would shrink errors near the frame
    smoothed = ndimage.correlate(err_t, gaussian_kernel(cfg.kernel_size, cfg.sigma), mode="nearest")
    min_err = err.copy()
    take = gt & (smoothed < err)
    min_err[take] = smoothed[take]
    weight = np.ones_like(err)
    weight[bg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[bg])
    ew = min_err * weight
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[bg].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (_EPS_MACHINE + tpw + fpw)
    q = (1 + cfg.beta2) * recall * precision / (_EPS_MACHINE + recall + cfg.beta2 * precision)
    return float(np.clip(q, 0.0, 1.0))


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + _EPS_MACHINE))


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = np.where(gt, pred, 0.0)
    bg = np.where(gt, 0.0, 1.0 - pred)
    u = gt.mean()
    return u * _object_score(fg[gt]) + (1 - u) * _object_score(bg[~gt])


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """1-based, rounded column/row centroid as in the reference code."""
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        return int(np.floor(cols / 2 + 0.5)), int(np.floor(rows / 2 + 0.5))
    cx = (gt.sum(axis=0) * np.arange(1, cols + 1)).sum() / total
    cy = (gt.sum(axis=1) * np.arange(1, rows + 1)).sum() / total
    return int(np.floor(cx + 0.5)), int(np.floor(cy + 0.5))


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    g = gt.astype(np.float64)
    x, y = pred.mean(), g.mean()
    denom = n - 1 + _EPS_MACHINE
    sx = ((pred - x) ** 2).sum() / denom
    sy = ((g - y) ** 2).sum() / denom
    sxy = ((pred - x) * (g - y)).sum() / denom
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + _EPS_MACHINE))
    return 1.0 if b == 0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    w1 = cx * cy / area
    w2 = (w - cx) * cy / area
    w3 = cx * (h - cy) / area
    w4 = 1.0 - w1 - w2 - w3
    parts = [
        (w1, np.s_[:cy, :cx]),
        (w2, np.s_[:cy, cx:]),
        (w3, np.s_[cy:, :cx]),
        (w4, np.s_[cy:, cx:]),
    ]
    return sum(wt * _ssim(pred[sl], gt[sl]) for wt, sl in parts)


def s_measure(pred, gt, cfg: MetricsConfig = DEFAULT) -> float:
    pred, gt = _pair(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    q = cfg.alpha * _s_object(pred, gt) + (1 - cfg.alpha) * _s_region(pred, gt)
    return float(min(max(q, 0.0), 1.0))


def adaptive_binarize(pred: np.ndarray) -> np.ndarray:
    """Foreground where ``pred >= min(2 * mean(pred), 1)`` and ``pred > 0``."""
    t = min(2.0 * pred.mean(), 1.0)
    return (pred >= t) & (pred > 0)


def e_measure(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    fm = adaptive_binarize(pred).astype(np.float64)
    g = gt.astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - fm
    elif gt.all():
        enhanced = fm
    else:
        a_fm = fm - fm.mean()
        a_gt = g - g.mean()
        align = 2 * a_gt * a_fm / (a_gt * a_gt + a_fm * a_fm + _EPS_MACHINE)
        enhanced = (align + 1) ** 2 / 4
    return float(enhanced.mean())


def all_metrics(pred, gt, cfg: MetricsConfig = DEFAULT) -> dict[str, float]:
    d, i = dice_iou(pred, gt, cfg)
    return {
        "dice": d,
        "iou": i,
        "fbw": weighted_fmeasure(pred, gt, cfg),
        "smeasure": s_measure(pred, gt, cfg),
        "emeasure": e_measure(pred, gt),
        "mae": mae(pred, gt),
    }


@dataclass
class MetricsReport:
    names: list[str] = field(default_factory=list)
    per_image: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def means(self) -> dict[str, float]:
        # plain left-to-right sum keeps the aggregation order fixed
        n = len(self.names)
        return {k: float(sum(v.tolist()) / n) if n else float("nan") for k, v in self.per_image.items()}

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", *METRIC_NAMES])
            for i, name in enumerate(self.names):
                w.writerow([name, *(f"{self.per_image[k][i]:.6f}" for k in METRIC_NAMES)])
            means = self.means
            w.writerow(["MEAN", *(f"{means[k]:.6f}" for k in METRIC_NAMES)])

    def percent_row(self) -> str:
        means = self.means
        return " ".join(f"{k}={100 * means[k]:.2f}" for k in METRIC_NAMES)


def evaluate_dataset(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    cfg: MetricsConfig = DEFAULT,
    names: Sequence[str] | None = None,
) -> MetricsReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions but {len(gts)} ground truths")
    names = list(names) if names is not None else [str(i) for i in range(len(preds))]
    if len(names) != len(preds):
        raise ValueError("one name per image is required")
    rows = [all_metrics(p, g, cfg) for p, g in zip(preds, gts)]
    per_image = {k: np.array([r[k] for r in rows], dtype=np.float64) for k in METRIC_NAMES}
    return MetricsReport(names=names, per_image=per_image)
