"""Probes: fresh heads trained on top of a frozen image encoder.

Encoder outputs are computed once with gradients disabled and cached, so
nothing upstream of the probe can change. The run still snapshots every
encoder parameter and compares bytes afterwards.
"""

from __future__ import annotations

import dataclasses
import hashlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from mtclip import config as cfgio
from mtclip import losses as L
from mtclip.errors import CheckpointError, ConfigError
from mtclip.evaluation.metrics import (
    ConfusionAccumulator,
    SumCountAccumulator,
    abs_rel_terms,
    angular_accuracy_terms,
    top1,
)
from mtclip.evaluation.report import MetricReport
from mtclip.models import Conv2d, Linear, Module, ModelBundle, ModelConfig, PyramidPooling, _rng, encode_image
from mtclip.synthdata.scenes import SHAPES
from mtclip.synthdata.shards import ShardArrays
from mtclip.tensor import Tensor, no_grad, ops
from mtclip.trainer.checkpoint import load_checkpoint, write_checkpoint
from mtclip.trainer.config import TrainConfig
from mtclip.trainer.optim import AdamW
from mtclip.trainer.schedule import lr_at_step

SEG_CLASS_NAMES = ("background",) + SHAPES
PROBE_METRIC = {"segmentation": "miou", "depth": "abs_rel", "surface_normal": "a30", "classification": "top1"}


class DenseProbe(Module):
    """Linear (one 1x1 conv) or pyramid-pooling probe on the feature grid."""

    def __init__(self, rng, dim: int, channels: int, kind: str, bins=(1, 2, 4), task: str = ""):
        self.psp = PyramidPooling(rng, dim, bins) if kind == "psp" else None
        self.out = Conv2d(rng, dim, channels, k=1)
        self._task = task

    def low_res(self, feats: Tensor) -> Tensor:
        x = self.psp(feats) if self.psp is not None else feats
        x = self.out(x)
        if self._task == "surface_normal":
            x = ops.l2_normalize(x, axis=1)
        return x


class ClassProbe(Module):
    def __init__(self, rng, dim: int, classes: int):
        self.fc = Linear(rng, dim, classes)

    def __call__(self, emb: Tensor) -> Tensor:
        return self.fc(emb)


@dataclasses.dataclass
class FrozenFeatures:
    feats: np.ndarray      # (N, D, h, w) spatial map
    embs: np.ndarray       # (N, shared_dim) normalised global embedding


def frozen_features(model: ModelBundle, data: ShardArrays, batch_size: int = 128) -> FrozenFeatures:
    feats, embs = [], []
    with no_grad():
        for i in range(0, len(data), batch_size):
            emb, f = encode_image(model, data.images(np.arange(i, min(i + batch_size, len(data)))))
            feats.append(f.data)
            embs.append(emb.data)
    return FrozenFeatures(np.concatenate(feats), np.concatenate(embs))


def classification_labels(data: ShardArrays) -> np.ndarray:
    """Dominant visible shape per image, as an index into the shape list."""
    return data.dominant_class() - 1


def _snapshot(model: ModelBundle) -> Dict[str, bytes]:
    return {k: p.data.tobytes() for k, p in model.parameter_map().items()}


@dataclasses.dataclass
class ProbeResult:
    report: MetricReport
    head: Module
    encoder_unchanged: bool
    encoder_grad_norm: float
    losses: list
    checkpoint: Optional[Path] = None


def _build_head(config: TrainConfig, mcfg: ModelConfig) -> Module:
    task, kind = config.probe.task, config.probe.head
    rng = _rng(config.seed, f"probe.{task}.{kind}")
    if task == "classification":
        return ClassProbe(rng, mcfg.shared_dim, len(SHAPES))
    channels = mcfg.task_channels(task)
    return DenseProbe(rng, mcfg.embed_dim, channels, kind, mcfg.psp_bin_sizes, task)


def _dense_loss(task: str, out_low: Tensor, data: ShardArrays, idx: np.ndarray) -> Tensor:
    s = data.gt_mask.shape[-1]
    if task == "segmentation":
        return L.segmentation_ce_upsampled(out_low, data.gt_mask[idx])
    pred = ops.nearest_upsample(out_low, s, s)
    if task == "depth":
        return L.ssi_probe_loss(pred, data.gt_disparity[idx][:, None].astype(np.float64))
    return L.angular_probe_loss(pred, data.gt_normals[idx].astype(np.float64))


def evaluate_probe(head: Module, task: str, feats: FrozenFeatures, data: ShardArrays,
                   batch_size: int = 64, num_classes: int = 9) -> MetricReport:
    s = data.gt_mask.shape[-1]
    conf = ConfusionAccumulator(num_classes)
    acc = SumCountAccumulator()
    with no_grad():
        if task == "classification":
            logits = head(Tensor(feats.embs)).data
            value = top1(logits, classification_labels(data))
            return MetricReport(task, "top1", value, sample_count=len(data))
        for i in range(0, len(data), batch_size):
            idx = np.arange(i, min(i + batch_size, len(data)))
            low = head.low_res(Tensor(feats.feats[idx])).data
            if task == "segmentation":
                pred = ops.nearest_upsample(Tensor(np.argmax(low, axis=1)[:, None].astype(np.float64)), s, s)
                conf.update(pred.data[:, 0].astype(np.int64), data.gt_mask[idx])
            else:
                pred = ops.nearest_upsample(Tensor(low), s, s).data
                if task == "depth":
                    acc.add(*abs_rel_terms(pred, data.gt_disparity[idx]))
                else:
                    acc.add(*angular_accuracy_terms(pred, data.gt_normals[idx]))
    if task == "segmentation":
        iou = conf.per_class_iou()
        per_class = {name: float(v) for name, v in zip(SEG_CLASS_NAMES, iou)}
        return MetricReport(task, "miou", 100.0 * conf.miou(),
                            per_class={k: 100.0 * v for k, v in per_class.items()}, sample_count=len(data))
    if task == "depth":
        return MetricReport(task, "abs_rel", acc.value(), sample_count=len(data))
    return MetricReport(task, "a30", 100.0 * acc.value(), sample_count=len(data))


def run_probe(config: TrainConfig, frozen: Union[str, Path, ModelBundle], train: ShardArrays, evaluation: ShardArrays,
              model_config: Optional[ModelConfig] = None, checkpoint_path=None,
              train_features: Optional[FrozenFeatures] = None,
              eval_features: Optional[FrozenFeatures] = None) -> ProbeResult:
    """Train a fresh probe head on frozen encoder outputs and score it on ``evaluation``.

    ``frozen`` is a checkpoint path (verified against ``model_config`` when
    given) or an in-memory bundle. Precomputed features may be passed to share
    them between probes of the same encoder.
    """
    config.validate()
    if config.phase != "probe":
        raise ConfigError("run_probe needs a config with phase=probe")
    model = load_checkpoint(frozen, model_config) if isinstance(frozen, (str, Path)) else frozen
    if model_config is not None and not isinstance(frozen, (str, Path)) and model.config.digest() != model_config.digest():
        raise CheckpointError("frozen model does not match the expected model config")
    mcfg = model.config
    before = _snapshot(model)
    for p in model.parameters():
        p.grad = None

    tr = train_features or frozen_features(model, train)
    ev = eval_features or frozen_features(model, evaluation)
    task = config.probe.task
    head = _build_head(config, mcfg)
    opt = AdamW(OrderedDict(head.named_parameters()), config.optimizer)
    labels = classification_labels(train) if task == "classification" else None

    n = len(train)
    steps_per_epoch = -(-n // config.batch_size)
    total = config.epochs * steps_per_epoch
    order = np.random.default_rng([config.seed, 0x9B0BE])
    losses = []
    step = 0
    for _ in range(config.epochs):
        perm = order.permutation(n)
        epoch_sum = 0.0
        for k in range(steps_per_epoch):
            idx = np.sort(perm[k * config.batch_size:(k + 1) * config.batch_size])
            if task == "classification":
                loss = ops.cross_entropy(head(Tensor(tr.embs[idx])), labels[idx])
            else:
                loss = _dense_loss(task, head.low_res(Tensor(tr.feats[idx])), train, idx)
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at_step(config.schedule, step, total, steps_per_epoch))
            epoch_sum += loss.item()
            step += 1
        losses.append(epoch_sum / steps_per_epoch)

    grad_norm = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in model.parameters() if p.grad is not None)))
    unchanged = _snapshot(model) == before
    if not unchanged:
        raise RuntimeError("frozen encoder parameters changed during probing")
    report = evaluate_probe(head, task, ev, evaluation, num_classes=mcfg.num_seg_classes)
    report.config_digest = hashlib.sha256(mcfg.digest() + config.digest()).hexdigest()[:16]
    report.seed = config.seed
    report.extra = {"head": config.probe.head, "final_train_loss": losses[-1]}
    ck = None
    if checkpoint_path is not None:
        text = cfgio.dumps(config) + f"backbone_digest={mcfg.digest().hex()}\n"
        arrays = OrderedDict((k, p.data) for k, p in head.named_parameters())
        ck = write_checkpoint(checkpoint_path, arrays, text, step=step, seed=config.seed)
    return ProbeResult(report, head, unchanged, grad_norm, losses, ck)
