"""``mtclip`` command-line interface.

Every command reads flat ``key=value`` config files, accepts ``--seed``,
writes machine-readable output (JSONL reports, CSV tables) and exits non-zero
with a single ``error[<category>]: <message>`` line on failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from mtclip import config as cfgio
from mtclip.errors import ArgumentError, ConfigError, InputError, MtclipError, ReportError
from mtclip.experiments import desk_pretrain_config
from mtclip.models import ModelConfig
from mtclip.synthdata.oracle import OracleConfig
from mtclip.synthdata.scenes import GeneratorConfig
from mtclip.trainer.config import TrainConfig

log = logging.getLogger("mtclip")


# ---------------------------------------------------------------------------
# job configs (one flat file per command)
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GenDataJob:
    count: int = 5000
    split_seed: int = 1
    with_pseudo: bool = True
    generator: GeneratorConfig = GeneratorConfig()
    oracle: OracleConfig = OracleConfig()


@dataclasses.dataclass(frozen=True)
class PretrainJob:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = dataclasses.field(default_factory=desk_pretrain_config)


def _load(cls, path: Optional[str], overrides: Sequence[str] = (), base=None):
    flat = cfgio.read_file(path) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    return cfgio.from_flat(cls, flat, base=base)


def _emit(records, out: Optional[str]) -> None:
    from mtclip.evaluation.report import write_jsonl

    if out:
        write_jsonl(out, records)
    for r in records:
        print(r.to_json() if hasattr(r, "to_json") else json.dumps(r, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from mtclip.synthdata.oracle import make_pseudo_labels
    from mtclip.synthdata.scenes import generate_samples
    from mtclip.synthdata.shards import class_pixel_counts, write_manifest, write_shard
    from mtclip.trainer.probe import SEG_CLASS_NAMES

    job = _load(GenDataJob, args.config, args.set)
    if args.seed is not None:
        job = dataclasses.replace(job, split_seed=args.seed)
    if args.count is not None:
        job = dataclasses.replace(job, count=args.count)
    job.generator.validate()
    job.oracle.validate()
    samples, seeds = generate_samples(job.generator, job.count, job.split_seed)
    pseudo = [make_pseudo_labels(s, job.oracle, k) for s, k in zip(samples, seeds)] if job.with_pseudo else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_shard(out, samples, pseudo)
    entries = cfgio.to_flat(job)
    entries["scene_seeds"] = ",".join(str(s) for s in seeds)
    gt = class_pixel_counts(np.stack([s.gt_mask for s in samples]))
    for name, c in zip(SEG_CLASS_NAMES, gt):
        entries[f"gt_class_pixels.{name}"] = str(int(c))
    if pseudo is not None:
        pc = class_pixel_counts(np.stack([p.mask for p in pseudo]))
        for name, c in zip(SEG_CLASS_NAMES, pc):
            entries[f"pseudo_class_pixels.{name}"] = str(int(c))
    write_manifest(out, entries)
    print(json.dumps({"shard": str(out), "count": job.count, "pseudo_labels": job.with_pseudo}))
    return 0


def cmd_pretrain(args) -> int:
    from mtclip.synthdata.shards import load_arrays
    from mtclip.trainer.pretrain import run_pretraining

    job = _load(PretrainJob, args.config, args.set)
    train = job.train
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    data = load_arrays(args.data)

    def progress(rec):
        log.info("epoch %d  loss %.4f  lr %.3g", rec["epoch"], rec["total"], rec["lr"])

    result = run_pretraining(train, job.model, data, log_path=args.log, checkpoint_path=args.out,
                             max_steps=args.max_steps, progress=progress)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"checkpoint": str(args.out), "steps": result.model.step,
                      "final_loss": last.get("total"), "experts": list(train.enabled_experts)}))
    return 0


def _expected_model_config(path: Optional[str]) -> Optional[ModelConfig]:
    if not path:
        return None
    return cfgio.from_flat(ModelConfig, cfgio.read_file(path))


def cmd_probe(args) -> int:
    from mtclip.synthdata.shards import load_arrays
    from mtclip.trainer.config import probe_config
    from mtclip.trainer.probe import run_probe

    train_data = load_arrays(args.train)
    if args.config:
        cfg = _load(TrainConfig, args.config, args.set)
    else:
        cfg = probe_config(args.task, args.head, lr_multiplier=args.lr_multiplier, epochs=args.epochs,
                           train_size=len(train_data))
        if args.set:
            cfg = _load(TrainConfig, None, args.set, base=cfg)
    cfg = dataclasses.replace(cfg, phase="probe")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    eval_data = load_arrays(args.eval)
    res = run_probe(cfg, args.checkpoint, train_data, eval_data, model_config=_expected_model_config(args.model_config),
                    checkpoint_path=args.save_head)
    res.report.extra["encoder_unchanged"] = res.encoder_unchanged
    _emit([res.report], args.out)
    return 0


def _images_and_labels(path):
    from mtclip.synthdata.shards import load_arrays

    data = load_arrays(path)
    return data, data.images(np.arange(len(data)))


def cmd_zeroshot(args) -> int:
    from mtclip.evaluation.report import MetricReport
    from mtclip.evaluation.zeroshot import zero_shot_classify
    from mtclip.synthdata.scenes import SHAPES
    from mtclip.trainer.checkpoint import load_checkpoint

    model = load_checkpoint(args.checkpoint, _expected_model_config(args.model_config))
    data, images = _images_and_labels(args.data)
    classes = args.classes.split(",") if args.classes else list(SHAPES)
    labels = data.dominant_class() - 1 if not args.classes else None
    res = zero_shot_classify(model, classes, args.template, images, labels)
    counts = np.bincount(res.predictions, minlength=len(classes))
    report = MetricReport("zeroshot", "top1", float("nan") if res.top1 is None else res.top1,
                          per_class={c: float(n) for c, n in zip(classes, counts)}, sample_count=len(data),
                          config_digest=model.config.digest().hex()[:16], seed=args.seed or 0,
                          extra={"template": args.template})
    _emit([report], args.out)
    return 0


def cmd_retrieval(args) -> int:
    from mtclip.evaluation.report import MetricReport
    from mtclip.evaluation.zeroshot import retrieval
    from mtclip.trainer.checkpoint import load_checkpoint

    model = load_checkpoint(args.checkpoint, _expected_model_config(args.model_config))
    data, images = _images_and_labels(args.data)
    try:
        ks = tuple(int(k) for k in args.k.split(","))
    except ValueError as exc:
        raise ArgumentError(f"--k must be comma-separated integers, got {args.k!r}") from exc
    bad = [k for k in ks if not 1 <= k <= len(data)]
    if bad:
        raise ArgumentError(f"k must lie in [1, {len(data)}] for this split, got {bad}")
    scores = retrieval(model, images, data.captions, ks)
    digest = model.config.digest().hex()[:16]
    reports = [MetricReport("retrieval", name, value, sample_count=len(data), config_digest=digest, seed=args.seed or 0)
               for name, value in scores.items()]
    _emit(reports, args.out)
    return 0


def cmd_report_delta(args) -> int:
    from mtclip.evaluation.report import classwise_delta_report, read_reports, write_csv
    from mtclip.synthdata.shards import read_manifest

    def pick(path):
        reps = [r for r in read_reports(path) if r.per_class is not None and r.task == args.task]
        if not reps:
            raise ReportError(f"{path}: no {args.task} report with per-class values")
        return reps[0]

    a, b = pick(args.a), pick(args.b)
    freq = None
    if args.manifest:
        manifest = read_manifest(args.manifest)
        prefix = "pseudo_class_pixels."
        freq = {k[len(prefix):]: int(v) for k, v in manifest.items() if k.startswith(prefix)}
        if not freq:
            raise InputError(f"{args.manifest}: manifest has no pseudo-label class counts")
    rows = classwise_delta_report(a, b, freq)
    write_csv(args.csv, rows, ["class", "value_a", "value_b", "delta", "frequency"])
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from mtclip import experiments as ex
    from mtclip.evaluation.report import write_csv, write_jsonl

    exp = _load(ex.ExperimentConfig, args.config, args.set)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed or 0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grids = args.grid.split(",")
    rows = ex.run_ablation(exp, seeds, grids=grids, jsonl_path=out / "runs.jsonl")
    tables = ex.ablation_tables(rows)
    for name, table in tables.items():
        write_csv(out / f"{name}.csv", table)
        for r in table:
            print(json.dumps({"table": name, **r}, sort_keys=True))
    write_jsonl(out / "summary.jsonl", [{"table": n, **r} for n, t in tables.items() for r in t])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtclip", description="Toy multi-task contrastive pretraining and probing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key=value config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override one config field (repeatable)")
        sp.add_argument("--seed", type=int, default=None)
        return sp

    sp = common(sub.add_parser("gen-data", help="render scenes and pseudo-labels into a shard"))
    sp.add_argument("--out", required=True, help="output shard path (manifest written alongside)")
    sp.add_argument("--count", type=int, default=None)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("pretrain", help="pretrain encoders (and task heads) on a shard"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="JSONL training log")
    sp.add_argument("--max-steps", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser("probe", help="train a probe on a frozen checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--train", required=True)
    sp.add_argument("--eval", required=True)
    sp.add_argument("--task", default="segmentation",
                    choices=["segmentation", "depth", "surface_normal", "classification"])
    sp.add_argument("--head", default="linear", choices=["linear", "psp"])
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr-multiplier", type=float, default=100.0)
    sp.add_argument("--model-config", help="expected model config; digest must match the checkpoint")
    sp.add_argument("--save-head", help="write the trained probe head here")
    sp.add_argument("--out", help="append the MetricReport as JSONL")
    sp.set_defaults(func=cmd_probe)

    sp = common(sub.add_parser("zeroshot", help="prompted zero-shot classification"), config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--template", default="a photo of a {}")
    sp.add_argument("--classes", help="comma-separated class names (default: the shape list)")
    sp.add_argument("--model-config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_zeroshot)

    sp = common(sub.add_parser("retrieval", help="image/text recall@k"), config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", default="1,5,10")
    sp.add_argument("--model-config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_retrieval)

    sp = common(sub.add_parser("report-delta", help="class-wise metric differences b - a"), config=False)
    sp.add_argument("--a", required=True, help="JSONL reports of the reference model")
    sp.add_argument("--b", required=True, help="JSONL reports of the compared model")
    sp.add_argument("--task", default="segmentation")
    sp.add_argument("--manifest", help="shard whose manifest supplies pseudo-label class frequencies")
    sp.add_argument("--csv", required=True)
    sp.set_defaults(func=cmd_report_delta)

    sp = common(sub.add_parser("ablate", help="expert-subset and head-depth grids"))
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seeds", help="comma-separated training seeds (default: --seed or 0)")
    sp.add_argument("--grid", default="experts,heads", help="comma-separated: experts, heads, baseline")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except MtclipError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error[io]: {exc.filename or exc}: no such file", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
