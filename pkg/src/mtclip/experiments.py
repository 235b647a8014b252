"""End-to-end experiment drivers: data splits, pretraining, probes, zero-shot.

Every training seed shares one set of data splits (fixed by ``data_seed``) so
comparisons between configurations are paired.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mtclip import config as cfgio
from mtclip.errors import ConfigError
from mtclip.evaluation.metrics import retrieval_report
from mtclip.evaluation.report import MetricReport
from mtclip.evaluation.zeroshot import DEFAULT_TEMPLATE, embed_images, embed_texts, zero_shot_classify
from mtclip.models import TASKS, ModelBundle, ModelConfig
from mtclip.synthdata.oracle import OracleConfig, make_pseudo_labels
from mtclip.synthdata.scenes import SHAPES, GeneratorConfig, generate_samples
from mtclip.synthdata.shards import ShardArrays, class_pixel_counts, stack_samples
from mtclip.trainer.checkpoint import load_checkpoint
from mtclip.trainer.config import TrainConfig, probe_config
from mtclip.trainer.pretrain import run_pretraining
from mtclip.trainer.probe import SEG_CLASS_NAMES, frozen_features, run_probe
from mtclip.trainer.schedule import ScheduleConfig

log = logging.getLogger(__name__)

TASK_METRIC = {"segmentation": "seg_miou", "depth": "depth_abs_rel", "surface_normal": "normal_a30",
               "classification": "cls_top1"}
LOWER_IS_BETTER = {"depth_abs_rel"}

# Split seeds are offsets from ``data_seed``; each split is disjoint by construction.
SPLITS = {"pretrain": 1, "probe_train": 2, "probe_eval": 3, "zeroshot": 4, "retrieval": 5}


def desk_pretrain_config() -> TrainConfig:
    """Pretraining recipe for training the toy encoders from scratch.

    Epochs, warmup length, batch size and the loss weights are the usual
    fine-tuning values; the peak learning rate is ten times higher because
    nothing here starts from a pretrained encoder.
    """
    return TrainConfig(schedule=ScheduleConfig(warmup_steps=1000, warmup_init_lr=1e-6, max_lr=3e-4, min_lr=1e-6))


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    pretrain_scenes: int = 5000
    probe_train_scenes: int = 1000
    probe_eval_scenes: int = 500
    zeroshot_scenes: int = 500
    retrieval_scenes: int = 500
    data_seed: int = 0
    generator: GeneratorConfig = GeneratorConfig()
    oracle: OracleConfig = OracleConfig()
    model: ModelConfig = ModelConfig()
    pretrain: TrainConfig = dataclasses.field(default_factory=desk_pretrain_config)
    probe_lr_multiplier: float = 100.0
    probe_epochs: Optional[int] = None
    probe_tasks: Tuple[str, ...] = ("segmentation", "depth", "surface_normal")
    probe_head: str = "linear"
    zeroshot_template: str = DEFAULT_TEMPLATE
    roundtrip_checkpoint: bool = True

    def digest(self) -> bytes:
        return cfgio.digest(self)

    def scaled(self, pretrain_scenes: int, epochs: int, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, pretrain_scenes=pretrain_scenes,
                                   pretrain=dataclasses.replace(self.pretrain, epochs=epochs), **kw)


@dataclasses.dataclass
class Datasets:
    pretrain: ShardArrays
    probe_train: ShardArrays
    probe_eval: ShardArrays
    zeroshot: ShardArrays
    retrieval: ShardArrays


def make_split(gen: GeneratorConfig, oracle: Optional[OracleConfig], count: int, split_seed: int) -> ShardArrays:
    samples, seeds = generate_samples(gen, count, split_seed)
    pseudo = [make_pseudo_labels(s, oracle, k) for s, k in zip(samples, seeds)] if oracle is not None else None
    return stack_samples(samples, pseudo)


_DATA_CACHE: Dict[str, Datasets] = {}


def _generate_datasets(exp: ExperimentConfig) -> Datasets:
    base = exp.data_seed * 100
    single = dataclasses.replace(exp.generator, min_objects=1, max_objects=1)
    log.info("generating data splits (%d pretraining scenes)", exp.pretrain_scenes)
    return Datasets(
        pretrain=make_split(exp.generator, exp.oracle, exp.pretrain_scenes, base + SPLITS["pretrain"]),
        probe_train=make_split(exp.generator, None, exp.probe_train_scenes, base + SPLITS["probe_train"]),
        probe_eval=make_split(exp.generator, None, exp.probe_eval_scenes, base + SPLITS["probe_eval"]),
        zeroshot=make_split(single, None, exp.zeroshot_scenes, base + SPLITS["zeroshot"]),
        retrieval=make_split(exp.generator, None, exp.retrieval_scenes, base + SPLITS["retrieval"]),
    )


def build_datasets(exp: ExperimentConfig) -> Datasets:
    data_fields = ("pretrain_scenes", "probe_train_scenes", "probe_eval_scenes", "zeroshot_scenes",
                   "retrieval_scenes", "data_seed", "generator", "oracle")
    key = repr([getattr(exp, f) for f in data_fields])
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()  # one dataset family in memory at a time
        _DATA_CACHE[key] = _generate_datasets(exp)
    return _DATA_CACHE[key]


def experts_label(experts: Sequence[str]) -> str:
    return "+".join(experts) if experts else "none"


def evaluate_encoder(model: ModelBundle, exp: ExperimentConfig, data: Datasets, seed: int) -> Tuple[dict, Dict[str, MetricReport]]:
    """Probe, zero-shot and retrieval numbers for one pretrained encoder."""
    row: dict = {}
    reports: Dict[str, MetricReport] = {}
    ftr = frozen_features(model, data.probe_train)
    fev = frozen_features(model, data.probe_eval)
    for task in exp.probe_tasks:
        cfg = probe_config(task, exp.probe_head if task != "classification" else "linear", seed,
                           exp.probe_lr_multiplier, exp.probe_epochs, len(data.probe_train))
        res = run_probe(cfg, model, data.probe_train, data.probe_eval, train_features=ftr, eval_features=fev)
        if not res.encoder_unchanged or res.encoder_grad_norm != 0.0:
            raise RuntimeError("probe modified the frozen encoder")
        row[TASK_METRIC[task]] = res.report.value
        reports[task] = res.report
    zs = data.zeroshot
    labels = zs.dominant_class() - 1
    row["zeroshot_top1"] = zero_shot_classify(model, SHAPES, exp.zeroshot_template, None, labels,
                                              image_embs=embed_images(model, zs.images(np.arange(len(zs))))).top1
    rt = data.retrieval
    row.update(retrieval_report(embed_images(model, rt.images(np.arange(len(rt)))), embed_texts(model, rt.captions)))
    return row, reports


def run_configuration(exp: ExperimentConfig, experts: Sequence[str], seed: int, head_layers: Optional[int] = None,
                      work_dir=None, data: Optional[Datasets] = None) -> Tuple[dict, Dict[str, MetricReport]]:
    """Pretrain one configuration and evaluate its frozen encoder."""
    data = data or build_datasets(exp)
    mcfg = exp.model if head_layers is None else dataclasses.replace(exp.model, head_layers=head_layers)
    tcfg = dataclasses.replace(exp.pretrain, enabled_experts=tuple(t for t in TASKS if t in experts), seed=seed)
    label = experts_label(tcfg.enabled_experts)
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        ck = Path(tmp) / "model.mtck" if exp.roundtrip_checkpoint else None
        result = run_pretraining(tcfg, mcfg, data.pretrain, checkpoint_path=ck)
        model = load_checkpoint(ck, result.model.config) if ck else result.model
    model.discard_heads()
    row, reports = evaluate_encoder(model, exp, data, seed)
    epochs = result.epoch_losses("clip")
    row = {"experts": label, "seed": seed, "head_layers": mcfg.head_layers, "steps": result.model.step,
           "final_clip_loss": epochs[-1], **row}
    log.info("finished %s seed=%d: %s", label, seed, row)
    return row, reports


def mean_by(rows: List[dict], key: str, metrics: Sequence[str]) -> Dict[str, Dict[str, float]]:
    out: Dict[str, Dict[str, float]] = {}
    for value in dict.fromkeys(r[key] for r in rows):
        group = [r for r in rows if r[key] == value]
        out[value] = {m: float(np.mean([r[m] for r in group])) for m in metrics if m in group[0]}
    return out


def expert_subsets() -> List[Tuple[str, ...]]:
    """All 8 subsets of the three experts, smallest first."""
    return [c for k in range(len(TASKS) + 1) for c in itertools.combinations(TASKS, k)]


def class_frequency(data: Datasets) -> Dict[str, int]:
    counts = class_pixel_counts(data.pretrain.pseudo_mask)
    return {name: int(c) for name, c in zip(SEG_CLASS_NAMES, counts)}


ABLATION_METRICS = ("seg_miou", "depth_abs_rel", "normal_a30", "zeroshot_top1", "i2t_r1", "t2i_r1")
HEAD_DEPTHS = (1, 3)


def run_ablation(exp: ExperimentConfig, seeds: Sequence[int], grids: Sequence[str] = ("experts", "heads"),
                 jsonl_path=None, work_dir=None) -> List[dict]:
    """Run the requested grids; every row is also appended to ``jsonl_path``.

    ``experts`` trains all 8 expert subsets, ``heads`` trains all experts at
    each head depth, ``baseline`` trains only the no-expert and all-expert rows.
    Runs shared between grids are trained once.
    """
    import json

    for g in grids:
        if g not in ("experts", "heads", "baseline"):
            raise ConfigError(f"unknown ablation grid {g!r}")
    plan: List[Tuple[Tuple[str, ...], Optional[int]]] = []
    if "experts" in grids:
        plan += [(s, None) for s in expert_subsets()]
    if "baseline" in grids:
        plan += [((), None), (TASKS, None)]
    if "heads" in grids:
        plan += [(TASKS, d) for d in HEAD_DEPTHS]
    default_depth = exp.model.head_layers
    unique = list(dict.fromkeys((e, default_depth if d is None else d) for e, d in plan))
    data = build_datasets(exp)
    rows = []
    fh = open(jsonl_path, "a", encoding="utf-8") if jsonl_path else None
    try:
        for seed in seeds:
            for experts, depth in unique:
                row, _ = run_configuration(exp, experts, seed, head_layers=depth, work_dir=work_dir, data=data)
                rows.append(row)
                if fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    return rows


def ablation_tables(rows: List[dict]) -> Dict[str, List[dict]]:
    """Seed-averaged tables: one row per expert subset and one per head depth."""
    tables: Dict[str, List[dict]] = {}
    default_rows = [r for r in rows if r["head_layers"] == rows[0]["head_layers"]] if rows else []
    labels = [experts_label(s) for s in expert_subsets()]
    by_experts = mean_by(default_rows, "experts", ABLATION_METRICS)
    table = []
    for label in labels:
        if label in by_experts:
            n = sum(1 for r in default_rows if r["experts"] == label)
            table.append({"experts": label, "seeds": n, **by_experts[label]})
    if len(table) > 2:
        tables["expert_subsets"] = table
    full = experts_label(TASKS)
    depth_rows = [r for r in rows if r["experts"] == full]
    by_depth = mean_by(depth_rows, "head_layers", ABLATION_METRICS)
    if len(by_depth) > 1:
        tables["head_depth"] = [{"head_layers": d, "seeds": sum(1 for r in depth_rows if r["head_layers"] == d),
                                 **m} for d, m in sorted(by_depth.items())]
    if not tables:
        tables["runs"] = [{"experts": e, **m} for e, m in by_experts.items()]
    return tables
