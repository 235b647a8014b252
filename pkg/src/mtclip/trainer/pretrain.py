"""Multi-task contrastive pretraining loop."""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from mtclip import losses as L
from mtclip.errors import ConfigError, TrainingDivergedError
from mtclip.models import (
    ModelBundle,
    ModelConfig,
    build_model,
    encode_image,
    encode_text,
    psp_forward,
    task_head_forward,
    task_head_low_res,
)
from mtclip.synthdata.shards import ShardArrays
from mtclip.synthdata.vocab import tokenize_batch
from mtclip.trainer.checkpoint import save_checkpoint
from mtclip.trainer.config import TrainConfig
from mtclip.trainer.optim import AdamW
from mtclip.trainer.schedule import lr_at_step

COMPONENT_ORDER = ("clip", "segmentation", "depth", "surface_normal")


@dataclasses.dataclass
class Batch:
    images: np.ndarray                      # float64 (B, 3, S, S)
    tokens: np.ndarray                      # int64 (B, T)
    seg: Optional[np.ndarray] = None        # int64 (B, S, S)
    disparity: Optional[np.ndarray] = None  # float64 (B, 1, S, S)
    normals: Optional[np.ndarray] = None    # float64 (B, 3, S, S)


def make_batch(data: ShardArrays, idx, tokens: np.ndarray, tasks=()) -> Batch:
    idx = np.asarray(idx)
    b = Batch(images=data.images(idx), tokens=tokens[idx])
    if "segmentation" in tasks:
        b.seg = data.pseudo_mask[idx].astype(np.int64)
    if "depth" in tasks:
        b.disparity = data.pseudo_disparity[idx][:, None].astype(np.float64)
    if "surface_normal" in tasks:
        b.normals = data.pseudo_normals[idx].astype(np.float64)
    return b


def compute_components(model: ModelBundle, batch: Batch, weights: L.LossWeights) -> Dict[str, "L.Tensor"]:
    """Every loss component with positive weight, each already a batch mean."""
    emb_i, feats = encode_image(model, batch.images)
    emb_t = encode_text(model, batch.tokens)
    comps = {}
    if weights.lambda_clip > 0:
        comps["clip"] = L.clip_contrastive_loss(emb_i, emb_t, model.logit_scale)
    active = weights.active_tasks()
    if active:
        fused = psp_forward(model, feats)
        s = batch.images.shape[-1]
        for task in active:
            if task == "segmentation":
                # Exact per-pixel CE of the upsampled logits, computed on the grid.
                comps[task] = L.segmentation_ce_upsampled(task_head_low_res(model, task, fused), batch.seg)
                continue
            out = task_head_forward(model, task, fused, s, s)
            if task == "depth":
                comps[task] = L.l1_dense(out, batch.disparity)
            else:
                comps[task] = L.l1_dense(out, batch.normals)
    return comps


def pretrain_step(model: ModelBundle, batch: Batch, weights: L.LossWeights, optimizer: AdamW, lr: float,
                  step: int = 0) -> L.LossReport:
    """One AdamW step on the weighted loss; the logit scale is re-clamped afterwards."""
    comps = compute_components(model, batch, weights)
    for name in COMPONENT_ORDER:
        if name in comps and not math.isfinite(comps[name].item()):
            raise TrainingDivergedError(f"non-finite {name} loss ({comps[name].item()}) at step {step}")
    report = L.combined_loss(comps, weights)
    if not math.isfinite(report.total_value):
        raise TrainingDivergedError(f"non-finite total loss at step {step}")
    optimizer.zero_grad()
    report.total.backward()
    optimizer.step(lr)
    model.clamp_logit_scale()
    return report


@dataclasses.dataclass
class PretrainResult:
    model: ModelBundle
    log: List[dict]
    checkpoint: Optional[Path] = None

    def epoch_losses(self, key: str = "total") -> List[float]:
        return [r[key] for r in self.log if r["kind"] == "epoch"]

    def step_losses(self, key: str = "total") -> List[float]:
        return [r[key] for r in self.log if r["kind"] == "step"]


def check_supervision(config: TrainConfig, data: ShardArrays) -> L.LossWeights:
    weights = config.effective_weights()
    active = weights.active_tasks()
    if active and not data.has_pseudo:
        raise ConfigError(f"experts {list(active)} are enabled but the training data has no pseudo-labels")
    return weights


def run_pretraining(config: TrainConfig, model_config: ModelConfig, data: ShardArrays,
                    log_path=None, checkpoint_path=None, max_steps: Optional[int] = None,
                    progress=None) -> PretrainResult:
    """Train from scratch for ``epochs * ceil(N / batch_size)`` steps.

    The model carries a head for every enabled expert and nothing else.
    ``max_steps`` stops early without changing the schedule.
    """
    config.validate()
    weights = check_supervision(config, data)
    mcfg = dataclasses.replace(model_config, tasks=tuple(config.enabled_experts))
    model = build_model(mcfg, config.seed)
    optimizer = AdamW(model.parameter_map(), config.optimizer)
    tokens = tokenize_batch(data.captions, context_length=mcfg.text_context_length)
    n = len(data)
    steps_per_epoch = -(-n // config.batch_size)
    total = config.epochs * steps_per_epoch
    order_rng = np.random.default_rng([config.seed, 0x5EED])
    active = weights.active_tasks()

    log: List[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            perm = order_rng.permutation(n)
            sums: Dict[str, float] = {}
            count = 0
            for k in range(steps_per_epoch):
                if max_steps is not None and step >= max_steps:
                    break
                idx = perm[k * config.batch_size:(k + 1) * config.batch_size]
                batch = make_batch(data, idx, tokens, active)
                lr = lr_at_step(config.schedule, step, total, steps_per_epoch)
                report = pretrain_step(model, batch, weights, optimizer, lr, step)
                rec = {"kind": "step", "step": step, "epoch": epoch, "lr": lr, "total": report.total_value,
                       **report.per_component, "logit_scale": float(model.logit_scale.data)}
                log.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                for key in ("total", *report.per_component):
                    sums[key] = sums.get(key, 0.0) + rec[key]
                count += 1
                step += 1
            if count:
                rec = {"kind": "epoch", "epoch": epoch, "step": step, "lr": lr,
                       **{k: v / count for k, v in sums.items()}}
                log.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if progress:
                    progress(rec)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if fh:
            fh.close()
    model.step = step
    ck = save_checkpoint(model, checkpoint_path, step=step) if checkpoint_path else None
    return PretrainResult(model, log, ck)
