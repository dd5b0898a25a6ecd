"""Target extraction from high-resolution grids and the evaluation metrics.

CSO-mAP treats every extracted target as a detection whose confidence is its
intensity. For each distance threshold, detections are ranked globally by
confidence, matched greedily to the nearest unmatched ground truth in the same
image (strictly closer than the threshold), and scored by 101-point
interpolated average precision. CSO-mAP is the mean over the thresholds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

DISTANCE_THRESHOLDS = (0.05, 0.1, 0.15, 0.2, 0.25)
EXTRACTION_THRESHOLD = 50.0
PEAK = 255.0
REPORT_FIELDS = ("ap_05", "ap_10", "ap_15", "ap_20", "ap_25", "cso_map", "psnr_mean", "ssim_mean", "n_images")


def _key(delta: float) -> str:
    return f"ap_{round(delta * 100):02d}"


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    intensity: float


def lowres_coord(k: int, c: int) -> float:
    """Pixel-centred coordinate of high-resolution index ``k``:
    ``(k - floor((c-1)/2)) / c``."""
    return (k - (c - 1) // 2) / c


def back_project(k: int, c: int, pixel_width: float = 1.0) -> float:
    """Sensor-frame (corner origin) coordinate of high-resolution index ``k``."""
    return (lowres_coord(k, c) + 0.5) * pixel_width


def extract_targets(pred, threshold: float = EXTRACTION_THRESHOLD, c: int = 3, pixel_width: float = 1.0) -> list[Detection]:
    """Every cell brighter than ``threshold`` becomes a detection."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    pred = np.asarray(pred, dtype=float)
    out = []
    for a, b in zip(*np.nonzero(pred > threshold)):
        out.append(Detection(back_project(int(a), c, pixel_width), back_project(int(b), c, pixel_width), float(pred[a, b])))
    return out


def rank_detections(dets) -> list[Detection]:
    """Descending confidence; ties broken by ascending (x, y)."""
    return sorted(dets, key=lambda d: (-d.intensity, d.x, d.y))


def match_detections(dets, gts, delta: float):
    """Greedy matching in confidence order.

    Returns ``(flags, gt_count)`` with ``flags[i]`` true when the i-th ranked
    detection claimed a still-unmatched ground truth at distance < ``delta``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    ranked = rank_detections(dets)
    gxy = np.array([(t.x, t.y) for t in gts], dtype=float).reshape(-1, 2)
    free = np.ones(len(gxy), dtype=bool)
    flags = []
    for d in ranked:
        hit = False
        if free.any():
            dist = np.hypot(gxy[:, 0] - d.x, gxy[:, 1] - d.y)
            dist[~free] = np.inf
            j = int(np.argmin(dist))
            if dist[j] < delta:
                free[j] = False
                hit = True
        flags.append(hit)
    return flags, len(gxy)


def precision_recall(flags, gt_count: int):
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    recall = tp / gt_count
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    return precision, recall


def average_precision(flags, gt_count: int) -> float:
    """101-point interpolated AP over confidence-ordered TP flags."""
    if gt_count <= 0 or len(flags) == 0:
        return 0.0
    precision, recall = precision_recall(flags, gt_count)
    # precision envelope: best precision at any equal-or-higher recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    q = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(np.mean(q))


@dataclass
class EvalReport:
    ap: dict[str, float]
    cso_map: float
    psnr_mean: float = float("nan")
    ssim_mean: float = float("nan")
    n_images: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: self.ap[k] for k in ("ap_05", "ap_10", "ap_15", "ap_20", "ap_25")}
        d.update(cso_map=self.cso_map, psnr_mean=self.psnr_mean, ssim_mean=self.ssim_mean, n_images=self.n_images)
        d.update(self.extra)
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def cso_map(predictions, ground_truths, thresholds=DISTANCE_THRESHOLDS) -> EvalReport:
    """Dataset-level CSO-mAP from per-image detection and target lists.

    Matching happens within each image; the resulting flags are pooled and
    re-ranked by confidence across the dataset (stable on image order).
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths must pair up per image")
    ap = {}
    for delta in thresholds:
        scores, flags, n_gt = [], [], 0
        for dets, gts in zip(predictions, ground_truths):
            f, n = match_detections(dets, gts, delta)
            scores.extend(d.intensity for d in rank_detections(dets))
            flags.extend(f)
            n_gt += n
        order = np.argsort(-np.asarray(scores, dtype=float), kind="mergesort")
        ap[_key(delta)] = average_precision([flags[i] for i in order], n_gt)
    return EvalReport(ap, float(np.mean(list(ap.values()))), n_images=len(predictions))


def psnr(pred, gt, peak: float = PEAK) -> float:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    # separable correlation, keeping only windows fully inside the image
    h = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[h : img.shape[0] - h, h : img.shape[1] - h]


def ssim(pred, gt, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, peak: float = PEAK) -> float:
    """Mean SSIM over valid positions of a Gaussian window."""
    x = np.asarray(pred, dtype=float)
    y = np.asarray(gt, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(np.mean(s))


def evaluate(preds, labels, targets, threshold: float = EXTRACTION_THRESHOLD, c: int = 3,
             pixel_width: float = 1.0, peak: float = PEAK) -> EvalReport:
    """Full report for predicted grids against label grids and target lists."""
    dets = [extract_targets(p, threshold, c, pixel_width) for p in preds]
    report = cso_map(dets, targets)
    report.psnr_mean = float(np.mean([psnr(p, s, peak) for p, s in zip(preds, labels)])) if len(preds) else float("nan")
    report.ssim_mean = float(np.mean([ssim(p, s, peak=peak) for p, s in zip(preds, labels)])) if len(preds) else float("nan")
    return report
