"""Synthetic scenes with exact dense ground truth, noisy pseudo-labels, and shard I/O."""

from mtclip.synthdata.oracle import OracleConfig, PseudoLabelSet, make_pseudo_labels
from mtclip.synthdata.scenes import (
    COLOR_NAMES,
    NUM_CLASSES,
    SHAPES,
    GeneratorConfig,
    Sample,
    SceneSpec,
    generate_samples,
    render_scene,
    sample_scene,
)
from mtclip.synthdata.shards import ShardArrays, load_arrays, read_shard, stack_samples, write_shard
from mtclip.synthdata.vocab import VOCAB_SIZE, default_vocab, tokenize, tokenize_batch

__all__ = [
    "COLOR_NAMES", "NUM_CLASSES", "SHAPES", "VOCAB_SIZE",
    "GeneratorConfig", "OracleConfig", "PseudoLabelSet", "Sample", "SceneSpec", "ShardArrays",
    "default_vocab", "generate_samples", "load_arrays", "make_pseudo_labels", "read_shard",
    "render_scene", "sample_scene", "stack_samples", "tokenize", "tokenize_batch", "write_shard",
]
