"""Training and probing objectives.

Pretraining minimises ``lambda_clip * clip + sum_t lambda_t * task_t`` where
each component is already a mean over its batch. Probing uses the
scale/shift-invariant disparity loss and a plain mean angular loss.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from mtclip.errors import ConfigError, DimensionError, InputError
from mtclip.tensor import Tensor, ops
from mtclip.tensor.core import as_tensor

IGNORE_ID = 255
SSI_DET_TOL = 1e-12


class EmptySupervisionWarning(UserWarning):
    """A dense loss had no valid pixels and returned 0."""


@dataclasses.dataclass(frozen=True)
class LossWeights:
    lambda_clip: float = 1.0
    lambda_task: Dict[str, float] = dataclasses.field(
        default_factory=lambda: {"segmentation": 0.1, "depth": 1.0, "surface_normal": 1.0}
    )

    def __post_init__(self):
        if self.lambda_clip < 0 or any(v < 0 for v in self.lambda_task.values()):
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_clip == 0 and not any(v > 0 for v in self.lambda_task.values()):
            raise ConfigError("at least one loss weight must be strictly positive")

    def active_tasks(self) -> Tuple[str, ...]:
        return tuple(t for t, w in self.lambda_task.items() if w > 0)

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.lambda_clip * factor, {t: w * factor for t, w in self.lambda_task.items()})


@dataclasses.dataclass
class LossReport:
    total: Tensor
    per_component: Dict[str, float]

    @property
    def total_value(self) -> float:
        return self.total.item()


def clip_contrastive_loss(image_embs: Tensor, text_embs: Tensor, logit_scale) -> Tensor:
    """Symmetric InfoNCE with diagonal targets and temperature ``exp(logit_scale)``."""
    image_embs, text_embs = as_tensor(image_embs), as_tensor(text_embs)
    b = image_embs.shape[0]
    if b == 0:
        raise InputError("contrastive loss needs at least one pair")
    if text_embs.shape != image_embs.shape:
        raise DimensionError(f"embedding shapes differ: {image_embs.shape} vs {text_embs.shape}")
    scale = ops.exp(as_tensor(logit_scale))
    logits = ops.matmul(image_embs, text_embs.transpose(1, 0)) * scale
    targets = np.arange(b)
    per_image = ops.cross_entropy(logits, targets)
    per_text = ops.cross_entropy(logits.transpose(1, 0), targets)
    return (per_image + per_text) * 0.5


def segmentation_ce(logits: Tensor, mask: np.ndarray, ignore_id: int = IGNORE_ID) -> Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels."""
    loss, count = ops.cross_entropy_map(logits, np.asarray(mask, dtype=np.int64), ignore_id)
    if count == 0:
        warnings.warn("segmentation_ce: every pixel is ignored", EmptySupervisionWarning, stacklevel=2)
    return loss


def nearest_cell_counts(mask: np.ndarray, num_classes: int, out_h: int, out_w: int,
                        ignore_id: int = IGNORE_ID) -> np.ndarray:
    """(B, C, out_h, out_w) class histograms of the full-resolution pixels that
    nearest-upsampling maps onto each low-resolution cell."""
    mask = np.asarray(mask)
    b, h, w = mask.shape
    cy = (np.arange(h) * out_h) // h
    cx = (np.arange(w) * out_w) // w
    cell = cy[:, None] * out_w + cx[None, :]
    keep = mask != ignore_id
    cls = mask.astype(np.int64)
    if np.any(keep & ((cls < 0) | (cls >= num_classes))):
        raise InputError(f"mask ids must lie in [0, {num_classes}) or equal {ignore_id}")
    flat = (np.arange(b)[:, None, None] * num_classes + cls) * (out_h * out_w) + cell[None]
    counts = np.bincount(flat[keep], minlength=b * num_classes * out_h * out_w)
    return counts.reshape(b, num_classes, out_h, out_w).astype(np.float64)


def segmentation_ce_upsampled(logits_low: Tensor, mask: np.ndarray, ignore_id: int = IGNORE_ID) -> Tensor:
    """``segmentation_ce(nearest_upsample(logits_low, H, W), mask)`` from the
    low-resolution logits and per-cell class counts."""
    logits_low = as_tensor(logits_low)
    _, c, h, w = logits_low.shape
    counts = nearest_cell_counts(mask, c, h, w, ignore_id)
    loss, count = ops.cross_entropy_counts(logits_low, counts)
    if count == 0:
        warnings.warn("segmentation_ce: every pixel is ignored", EmptySupervisionWarning, stacklevel=2)
    return loss


def _valid_mask(valid: Optional[np.ndarray], shape) -> np.ndarray:
    b, _, h, w = shape
    if valid is None:
        return np.ones((b, 1, h, w))
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (b, h, w):
        raise DimensionError(f"valid map {valid.shape} does not match (B, H, W) = {(b, h, w)}")
    return valid[:, None].astype(np.float64)


def l1_dense(pred: Tensor, target, valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean absolute difference over every channel of every valid pixel."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_dense: pred {pred.shape} vs target {target.shape}")
    m = _valid_mask(valid, pred.shape)
    denom = m.sum() * pred.shape[1]
    if denom == 0:
        warnings.warn("l1_dense: empty valid set", EmptySupervisionWarning, stacklevel=2)
        return ops.sum(pred * 0.0)
    return ops.sum(ops.abs(pred - target) * m) * (1.0 / denom)


def combined_loss(components: Mapping[str, Tensor], weights: LossWeights) -> LossReport:
    """Weighted sum of the contrastive and task losses.

    Components whose weight is zero are reported but left out of the graph.
    """
    if weights.lambda_clip > 0 and "clip" not in components:
        raise ConfigError("lambda_clip > 0 but no 'clip' component was provided")
    for task in weights.active_tasks():
        if task not in components:
            raise ConfigError(f"lambda_task[{task!r}] > 0 but no {task!r} component was provided")
    total = None
    terms = [("clip", weights.lambda_clip)] + [(t, w) for t, w in weights.lambda_task.items()]
    for name, w in terms:
        if w > 0:
            term = components[name] * w
            total = term if total is None else total + term
    report = {name: components[name].item() for name in components}
    return LossReport(total=total, per_component=report)


def _ssi_stats(pred: np.ndarray, gt: np.ndarray, m: np.ndarray):
    n = m.sum(axis=(1, 2, 3))
    if np.any(n < 2):
        raise InputError("scale/shift alignment needs at least 2 valid pixels per image")
    p_mean = (pred * m).sum(axis=(1, 2, 3)) / n
    g_mean = (gt * m).sum(axis=(1, 2, 3)) / n
    return n, p_mean, g_mean


def ssi_scale_shift(pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None):
    """Per-image least-squares ``(s, t)`` minimising ``sum (s*pred + t - gt)^2`` over valid pixels.

    Arrays are (B, 1, H, W). When ``n * sum (pred - mean)^2`` falls below
    1e-12 the fallback ``s = 0, t = mean(gt)`` is used.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _valid_mask(valid, pred.shape)
    n, p_mean, g_mean = _ssi_stats(pred, gt, m)
    pc = (pred - p_mean[:, None, None, None]) * m
    gc = (gt - g_mean[:, None, None, None]) * m
    var = (pc * pc).sum(axis=(1, 2, 3))
    cov = (pc * gc).sum(axis=(1, 2, 3))
    degenerate = n * var < SSI_DET_TOL
    s = np.where(degenerate, 0.0, cov / np.where(degenerate, 1.0, var))
    t = g_mean - s * p_mean
    return s, t


def ssi_probe_loss(pred_disparity: Tensor, gt_disparity, valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean absolute residual after the per-image least-squares scale and shift.

    The closed-form ``(s, t)`` is differentiated through, so the loss is
    exactly invariant to affine changes of the prediction.
    """
    pred = as_tensor(pred_disparity)
    gt = np.asarray(gt_disparity.data if isinstance(gt_disparity, Tensor) else gt_disparity, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[1] != 1:
        raise DimensionError(f"ssi_probe_loss expects matching (B, 1, H, W) maps, got {pred.shape} and {gt.shape}")
    m = _valid_mask(valid, pred.shape)
    n, p_mean_np, g_mean = _ssi_stats(pred.data, gt, m)
    axes = (1, 2, 3)
    bshape = (-1, 1, 1, 1)
    p_mean = ops.sum(pred * m, axis=axes) * (1.0 / n)
    pc = (pred - p_mean.reshape(bshape)) * m
    gc = (gt - g_mean.reshape(bshape)) * m
    var = ops.sum(pc * pc, axis=axes)
    cov = ops.sum(pc * gc, axis=axes)
    degenerate = (n * var.data < SSI_DET_TOL).astype(np.float64)
    s = cov / (var + degenerate) * (1.0 - degenerate)
    t = g_mean - s * p_mean
    resid = ops.abs(pred * s.reshape(bshape) + t.reshape(bshape) - gt) * m
    per_image = ops.sum(resid, axis=axes) * (1.0 / n)
    return ops.mean(per_image)


def angular_probe_loss(pred_normals: Tensor, gt_normals, valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean angle in radians between unit normal maps over valid pixels."""
    pred = as_tensor(pred_normals)
    gt = np.asarray(gt_normals.data if isinstance(gt_normals, Tensor) else gt_normals, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[1] != 3:
        raise DimensionError(f"angular_probe_loss expects matching (B, 3, H, W) maps, got {pred.shape} and {gt.shape}")
    m = _valid_mask(valid, pred.shape)[:, 0]
    count = m.sum()
    if count == 0:
        warnings.warn("angular_probe_loss: empty valid set", EmptySupervisionWarning, stacklevel=2)
        return ops.sum(pred * 0.0)
    cos = ops.sum(pred * gt, axis=1)
    return ops.sum(ops.arccos(cos) * m) * (1.0 / count)


def angular_error_deg(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel angle in degrees between (B, 3, H, W) unit normal maps."""
    cos = np.clip((np.asarray(pred) * np.asarray(gt)).sum(axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


__all__ = [
    "EmptySupervisionWarning",
    "IGNORE_ID",
    "LossReport",
    "LossWeights",
    "angular_error_deg",
    "angular_probe_loss",
    "clip_contrastive_loss",
    "combined_loss",
    "l1_dense",
    "nearest_cell_counts",
    "segmentation_ce",
    "segmentation_ce_upsampled",
    "ssi_probe_loss",
    "ssi_scale_shift",
]
