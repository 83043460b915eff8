"""Salient object detection metrics: MAE, F-measure, E-measure, S-measure.

Conventions (fixed so that results are reproducible bit for bit):

* MAE sums absolute errors with a correctly rounded sum before dividing.
* A prediction ``p`` is positive at threshold ``t`` in ``0..255`` when
  ``p * 255 >= t``.
* Precision is 0 when nothing is predicted positive; F is 0 when
  ``beta2 * P + R == 0``.
* E-measure is the pixel mean of the enhanced alignment map.  For a
  ground truth that is all background it is ``mean(1 - FM)``, for an all
  foreground one ``mean(FM)``.
* S-measure: gt empty -> ``1 - mean(pred)``, gt full -> ``mean(pred)``,
  otherwise ``0.5 * object + 0.5 * region``, clamped to [0, 1].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BETA2 = 0.3
N_THRESHOLDS = 256


class EmptyGroundTruthError(ValueError):
    pass


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if pred.ndim != 2:
        raise ValueError(f"expected 2-D maps, got {pred.ndim}-D")
    if not np.isfinite(pred).all():
        raise ValueError("pred has non-finite entries")
    return pred, gt.astype(bool)


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum(np.abs(pred - gt).ravel().tolist()) / gt.size


def _threshold_counts(pred, gt):
    """Positive predictions and true positives at every threshold 0..255."""
    # p*255 >= t  <=>  floor(p*255) >= t for integer t
    level = np.clip(np.floor(pred * 255), 0, 255).astype(np.int64)
    hist_all = np.bincount(level.ravel(), minlength=N_THRESHOLDS)
    hist_fg = np.bincount(level[gt], minlength=N_THRESHOLDS)
    predicted = np.cumsum(hist_all[::-1])[::-1]
    tp = np.cumsum(hist_fg[::-1])[::-1]
    return predicted, tp


def pr_at_thresholds(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = _pair(pred, gt)
    n_fg = int(gt.sum())
    if n_fg == 0:
        raise EmptyGroundTruthError("ground truth has no foreground pixels")
    predicted, tp = _threshold_counts(pred, gt)
    precision = np.divide(tp, predicted, out=np.zeros(N_THRESHOLDS), where=predicted > 0)
    recall = tp / n_fg
    return precision, recall


def f_beta(precision, recall, beta2: float = BETA2) -> tuple[np.ndarray, float]:
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    num = (1 + beta2) * p * r
    den = beta2 * p + r
    f = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return f, float(f.max())


def _alignment(g, f, mu_g, mu_f):
    # xi = 2 ag af / (ag^2 + af^2) on mean-centred maps (0 when both are 0); phi = (xi + 1)^2 / 4
    ag = g - mu_g
    af = f - mu_f
    den = ag * ag + af * af
    align = np.divide(2 * ag * af, den, out=np.zeros_like(den, dtype=np.float64), where=den > 0)
    return (align + 1) ** 2 / 4


def e_measure_curve(pred, gt) -> np.ndarray:
    """E-measure at every threshold.

    The binarized map and the ground truth each take two values, so the
    enhanced map only has four distinct entries; they are weighted by the
    confusion counts.
    """
    pred, gt = _pair(pred, gt)
    n = gt.size
    n_fg = int(gt.sum())
    predicted, tp = _threshold_counts(pred, gt)
    if n_fg == 0:
        return (n - predicted) / n
    if n_fg == n:
        return predicted / n
    fp = predicted - tp
    fn = n_fg - tp
    tn = n - n_fg - fp
    mu_g = n_fg / n
    mu_f = predicted / n
    total = (
        tp * _alignment(1.0, 1.0, mu_g, mu_f)
        + fp * _alignment(0.0, 1.0, mu_g, mu_f)
        + fn * _alignment(1.0, 0.0, mu_g, mu_f)
        + tn * _alignment(0.0, 0.0, mu_g, mu_f)
    )
    return total / n


def e_measure(pred, gt, t: int) -> float:
    return float(e_measure_curve(pred, gt)[t])


def _object_score(values: np.ndarray) -> float:
    # 2 mu / (mu^2 + 1 + sigma), sigma the sample std (ddof 1)
    mu = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sigma)


def _ssim(x: np.ndarray, y: np.ndarray) -> float:
    # 4 mx my sxy / ((mx^2 + my^2)(sx + sy)), covariances over n - 1; 1 if both moments vanish
    n = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    d = max(n - 1, 1)
    sx = (dx * dx).sum() / d
    sy = (dy * dy).sum() / d
    sxy = (dx * dy).sum() / d
    alpha = 4 * mx * my * sxy
    beta = (mx * mx + my * my) * (sx + sy)
    if alpha != 0:
        return alpha / beta
    return 1.0 if beta == 0 else 0.0


def centroid(gt: np.ndarray) -> tuple[int, int]:
    """Split point ``(x, y)``: rounded foreground centroid plus one."""
    h, w = gt.shape
    ys, xs = np.nonzero(gt)
    if ys.size == 0:
        return int(round(w / 2)), int(round(h / 2))
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _pair(pred, gt)
    y = gt.mean()
    if y == 0:
        score = 1 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        # object term: foreground and background scores weighted by gt coverage
        fg = _object_score(pred[gt])
        bg = _object_score(1 - pred[~gt])
        s_object = y * fg + (1 - y) * bg

        # region term: ssim of the four centroid-split quadrants, weighted by pixel count
        h, w = gt.shape
        x0, y0 = centroid(gt)
        acc = 0.0
        for rows in (slice(0, y0), slice(y0, h)):
            for cols in (slice(0, x0), slice(x0, w)):
                p, g = pred[rows, cols], gt[rows, cols].astype(np.float64)
                if p.size:
                    acc += p.size * _ssim(p, g)
        s_region = acc / gt.size
        score = alpha * s_object + (1 - alpha) * s_region
    return float(min(max(score, 0.0), 1.0))


@dataclass
class ImageMetrics:
    mae: float
    precision: np.ndarray
    recall: np.ndarray
    e_curve: np.ndarray
    s_measure: float
    has_foreground: bool


def evaluate_pair(pred, gt) -> ImageMetrics:
    pred, gt = _pair(pred, gt)
    try:
        precision, recall = pr_at_thresholds(pred, gt)
        has_fg = True
    except EmptyGroundTruthError:
        precision = recall = np.zeros(N_THRESHOLDS)
        has_fg = False
    return ImageMetrics(mae(pred, gt), precision, recall, e_measure_curve(pred, gt), s_measure(pred, gt), has_fg)


@dataclass
class MetricsReport:
    mae: float
    precision: np.ndarray
    recall: np.ndarray
    f_beta: np.ndarray
    max_f: float
    e_curve: np.ndarray
    max_e: float
    s_measure: float
    n_images: int
    n_excluded_f: int = 0
    excluded_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "max_f": self.max_f,
            "max_e": self.max_e,
            "s_measure": self.s_measure,
            "n_images": self.n_images,
            "n_excluded_f": self.n_excluded_f,
            "excluded_ids": list(self.excluded_ids),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f_beta": self.f_beta.tolist(),
            "e_curve": self.e_curve.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        arrays = {k: np.asarray(d[k], dtype=np.float64) for k in ("precision", "recall", "f_beta", "e_curve")}
        return cls(
            mae=d["mae"], max_f=d["max_f"], max_e=d["max_e"], s_measure=d["s_measure"],
            n_images=d["n_images"], n_excluded_f=d.get("n_excluded_f", 0),
            excluded_ids=d.get("excluded_ids", []), **arrays,
        )

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read_json(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_curves(self, out_dir) -> None:
        """``fm_curve.csv`` (threshold,precision,recall,f) and ``pr_curve.csv`` (recall,precision)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "fm_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "f"])
            for t in range(N_THRESHOLDS):
                w.writerow([t, repr(float(self.precision[t])), repr(float(self.recall[t])), repr(float(self.f_beta[t]))])
        with open(out / "pr_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "recall", "precision"])
            for t in range(N_THRESHOLDS):
                w.writerow([t, repr(float(self.recall[t])), repr(float(self.precision[t]))])


def aggregate(images: Sequence[ImageMetrics], ids: Sequence[str] | None = None) -> MetricsReport:
    """Dataset report: mean P/R per threshold then F, mean E per threshold then max."""
    if not images:
        raise ValueError("cannot aggregate zero images")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    with_fg = [m for m in images if m.has_foreground]
    excluded = [i for i, m in zip(ids, images) if not m.has_foreground]
    if with_fg:
        precision = np.mean([m.precision for m in with_fg], axis=0)
        recall = np.mean([m.recall for m in with_fg], axis=0)
    else:
        precision = recall = np.zeros(N_THRESHOLDS)
    f, max_f = f_beta(precision, recall)
    e_curve = np.mean([m.e_curve for m in images], axis=0)
    return MetricsReport(
        mae=float(np.mean([m.mae for m in images])),
        precision=precision,
        recall=recall,
        f_beta=f,
        max_f=max_f,
        e_curve=e_curve,
        max_e=float(e_curve.max()),
        s_measure=float(np.mean([m.s_measure for m in images])),
        n_images=len(images),
        n_excluded_f=len(excluded),
        excluded_ids=excluded,
    )
