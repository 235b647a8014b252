"""Dense-prediction and retrieval metrics.

Segmentation IoU is accumulated over a whole split through a confusion
matrix; accumulators for every metric merge by plain summation, so shards can
be evaluated independently and combined in any order.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from mtclip.errors import ArgumentError, DimensionError, MetricError
from mtclip.losses import IGNORE_ID, angular_error_deg, ssi_scale_shift
from mtclip.tensor import Tensor

MIN_DISPARITY = 1e-4


class ConfusionAccumulator:
    """Dataset-level confusion matrix (rows = ground truth, columns = prediction)."""

    def __init__(self, num_classes: int, ignore_id: int = IGNORE_ID):
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionAccumulator":
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction and ground truth sizes differ: {pred.size} vs {gt.size}")
        keep = gt != self.ignore_id
        pred, gt = pred[keep], gt[keep]
        c = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ArgumentError(f"class ids must lie in [0, {c})")
        self.matrix += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ArgumentError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes, self.ignore_id)
        out.matrix = self.matrix + other.matrix
        return out

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both prediction and ground truth."""
        tp = np.diag(self.matrix).astype(np.float64)
        denom = self.matrix.sum(axis=0) + self.matrix.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)

    def miou(self) -> float:
        iou = self.per_class_iou()
        if np.all(np.isnan(iou)):
            raise MetricError("mIoU undefined: no labelled pixels")
        return float(np.nanmean(iou))

    def class_pixel_counts(self) -> np.ndarray:
        return self.matrix.sum(axis=1)


def miou(pred_mask, gt_mask, num_classes: int, ignore_id: int = IGNORE_ID) -> Tuple[np.ndarray, float]:
    acc = ConfusionAccumulator(num_classes, ignore_id).update(pred_mask, gt_mask)
    return acc.per_class_iou(), acc.miou()


def _as_b1hw(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"expected (B, H, W) or (B, 1, H, W) disparity, got {x.shape}")
    return x


class SumCountAccumulator:
    """Running ``sum / count`` that merges by addition."""

    def __init__(self, total: float = 0.0, count: int = 0):
        self.total = float(total)
        self.count = int(count)

    def add(self, total: float, count: int) -> "SumCountAccumulator":
        self.total += float(total)
        self.count += int(count)
        return self

    def merge(self, other: "SumCountAccumulator") -> "SumCountAccumulator":
        return SumCountAccumulator(self.total + other.total, self.count + other.count)

    def value(self) -> float:
        if self.count == 0:
            raise MetricError("metric undefined: no valid pixels")
        return self.total / self.count


def abs_rel_terms(pred_disparity, gt_disparity, valid=None) -> Tuple[float, int]:
    """Sum of per-pixel relative depth errors after scale/shift alignment, and the pixel count."""
    pred = _as_b1hw(pred_disparity)
    gt = _as_b1hw(gt_disparity)
    if pred.shape != gt.shape:
        raise DimensionError(f"abs_rel: pred {pred.shape} vs gt {gt.shape}")
    m = np.ones(gt.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(gt.shape)
    if not m.any():
        raise MetricError("abs_rel: no valid pixels")
    if np.any(gt[m] <= 0):
        raise MetricError("abs_rel: ground-truth disparity must be positive on valid pixels")
    s, t = ssi_scale_shift(pred, gt, m[:, 0])
    aligned = pred * s[:, None, None, None] + t[:, None, None, None]
    d_pred = 1.0 / np.maximum(aligned, MIN_DISPARITY)
    d_gt = 1.0 / np.maximum(gt, MIN_DISPARITY)
    rel = np.abs(d_pred - d_gt) / d_gt
    return float(rel[m].sum()), int(m.sum())


def abs_rel(pred_disparity, gt_disparity, valid=None) -> float:
    """Mean |d_pred - d_gt| / d_gt over valid pixels, with d = 1 / max(disparity, 1e-4)
    and the prediction first aligned to the ground truth per image."""
    total, count = abs_rel_terms(pred_disparity, gt_disparity, valid)
    return total / count


def angular_accuracy_terms(pred_normals, gt_normals, threshold_deg: float = 30.0, valid=None) -> Tuple[int, int]:
    pred = np.asarray(pred_normals, dtype=np.float64)
    gt = np.asarray(gt_normals, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[1] != 3:
        raise DimensionError(f"angular_accuracy: expected matching (B, 3, H, W) maps, got {pred.shape}, {gt.shape}")
    err = angular_error_deg(pred, gt)
    m = np.ones(err.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(err.shape)
    if not m.any():
        raise MetricError("angular_accuracy: no valid pixels")
    return int((err[m] < threshold_deg).sum()), int(m.sum())


def angular_accuracy(pred_normals, gt_normals, threshold_deg: float = 30.0, valid=None) -> float:
    """Percentage of valid pixels whose angular error is below ``threshold_deg``."""
    hits, count = angular_accuracy_terms(pred_normals, gt_normals, threshold_deg, valid)
    return 100.0 * hits / count


def top1(logits, labels) -> float:
    """Percentage of rows whose argmax equals the label (ties go to the lowest index)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"top1: logits {logits.shape} vs labels {labels.shape}")
    if len(labels) == 0:
        raise MetricError("top1: empty evaluation set")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def _unit_rows(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def match_ranks(sim: np.ndarray) -> np.ndarray:
    """Rank of the diagonal entry in each row (0 = best); ties go to the lower column index."""
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)][:, None]
    better = (sim > diag).sum(axis=1)
    cols = np.arange(sim.shape[1])[None, :]
    tied_before = ((sim == diag) & (cols < np.arange(n)[:, None])).sum(axis=1)
    return better + tied_before


def recall_at_k(image_embs, text_embs, k: int) -> Dict[str, float]:
    """Percentage of queries whose paired item ranks in the top ``k`` by cosine similarity."""
    img = _unit_rows(image_embs)
    txt = _unit_rows(text_embs)
    if img.shape != txt.shape:
        raise DimensionError(f"recall_at_k: {img.shape} vs {txt.shape}")
    n = img.shape[0]
    if k < 1 or k > n:
        raise ArgumentError(f"k must lie in [1, {n}], got {k}")
    sim = img @ txt.T
    return {
        "image_to_text": 100.0 * float(np.mean(match_ranks(sim) < k)),
        "text_to_image": 100.0 * float(np.mean(match_ranks(sim.T) < k)),
    }


def retrieval_report(image_embs, text_embs, ks=(1, 5, 10)) -> Dict[str, float]:
    out = {}
    n = _unit_rows(image_embs).shape[0]
    for k in ks:
        if k <= n:
            r = recall_at_k(image_embs, text_embs, k)
            out[f"i2t_r{k}"] = r["image_to_text"]
            out[f"t2i_r{k}"] = r["text_to_image"]
    return out
