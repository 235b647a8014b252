"""Toy dual-encoder CLIP with a shared pyramid-pooling module and dense task heads.

The image and text encoders produce L2-normalised embeddings in a shared
space. During multi-task pretraining the image encoder's spatial feature map
also feeds a pyramid pooling module and one head per enabled task; neither
touches the embedding path, so heads can be dropped after training without
changing any embedding.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from mtclip import config as cfgio
from mtclip.errors import ConfigError, DimensionError, InputError, UsageError
from mtclip.synthdata.vocab import VOCAB_SIZE
from mtclip.tensor import Tensor, ops

TASKS = ("segmentation", "depth", "surface_normal")
ENCODER_KINDS = ("vit_tiny", "cnn_tiny")
LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    encoder_kind: str = "vit_tiny"
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: int = 2
    text_vocab_size: int = VOCAB_SIZE
    text_context_length: int = 16
    shared_dim: int = 32
    psp_bin_sizes: Tuple[int, ...] = (1, 2, 4)
    head_layers: int = 1
    tasks: Tuple[str, ...] = TASKS
    num_seg_classes: int = 9

    def __post_init__(self):
        object.__setattr__(self, "psp_bin_sizes", tuple(self.psp_bin_sizes))
        object.__setattr__(self, "tasks", tuple(t for t in TASKS if t in self.tasks))

    def validate(self) -> "ModelConfig":
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        for name in ("image_size", "embed_dim", "depth", "num_heads", "text_vocab_size",
                     "text_context_length", "shared_dim", "num_seg_classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.encoder_kind == "vit_tiny":
            if self.patch_size < 1 or self.image_size % self.patch_size:
                raise ConfigError(f"image_size ({self.image_size}) must be divisible by patch_size ({self.patch_size})")
        elif self.image_size % 8:
            raise ConfigError(f"image_size ({self.image_size}) must be divisible by 8 for cnn_tiny")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})")
        if self.head_layers not in (1, 3):
            raise ConfigError(f"head_layers must be 1 or 3, got {self.head_layers}")
        if self.text_context_length < 2:
            raise ConfigError("text_context_length must leave room for BOS and EOS")
        grid = self.grid_size
        if not self.psp_bin_sizes or any(b < 1 or b > grid for b in self.psp_bin_sizes):
            raise ConfigError(f"psp_bin_sizes must lie in [1, {grid}], got {self.psp_bin_sizes}")
        if self.embed_dim // len(self.psp_bin_sizes) < 1:
            raise ConfigError("psp_bin_sizes has more bins than embed_dim channels")
        return self

    @property
    def grid_size(self) -> int:
        if self.encoder_kind == "vit_tiny":
            return self.image_size // self.patch_size
        return self.image_size // 8

    def task_channels(self, task: str) -> int:
        return {"segmentation": self.num_seg_classes, "depth": 1, "surface_normal": 3}[task]

    def digest(self) -> bytes:
        return cfgio.digest(self)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def _rng(seed: int, component: str) -> np.random.Generator:
    # One stream per component: adding or removing heads never shifts encoder init.
    return np.random.default_rng([seed, zlib.crc32(component.encode())])


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Module:
    """Attribute-based parameter registry (tensors, submodules, lists/dicts of submodules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = prefix + name
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True):
        self.weight = param(trunc_normal(rng, (n_out, n_in)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 1, stride: int = 1):
        self.weight = param(trunc_normal(rng, (c_out, c_in, k, k)))
        self.bias = param(np.zeros(c_out))
        self._stride = stride
        self._padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int):
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)
        self._heads = heads

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        b, n, d = x.shape
        h = self._heads
        qkv = self.qkv(self.ln1(x)).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        attn = ops.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2], mask)
        x = x + self.proj(attn.transpose(0, 2, 1, 3).reshape(b, n, d))
        return x + self.fc2(ops.gelu(self.fc1(self.ln2(x))))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class VitTinyEncoder(Module):
    def __init__(self, cfg: ModelConfig, seed: int):
        rng = _rng(seed, "image")
        p, d = cfg.patch_size, cfg.embed_dim
        self._cfg = cfg
        self.patch_embed = Linear(rng, 3 * p * p, d)
        self.pos_embed = param(trunc_normal(rng, (1, cfg.grid_size ** 2, d)))
        self.blocks = [TransformerBlock(rng, d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.shared_dim, bias=False)

    def features(self, images: Tensor) -> Tensor:
        cfg = self._cfg
        b = images.shape[0]
        p, g = cfg.patch_size, cfg.grid_size
        patches = images.reshape(b, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, 3 * p * p)
        x = self.patch_embed(patches) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.ln_final(x)
        return x.transpose(0, 2, 1).reshape(b, cfg.embed_dim, g, g)

    def embed(self, feats: Tensor) -> Tensor:
        # Global embedding: mean over patch tokens, then a linear projection.
        return self.proj(feats.mean(axis=(2, 3)))


class CnnTinyEncoder(Module):
    """Three stride-2 3x3 conv blocks (ReLU) followed by a per-pixel channel LayerNorm."""

    def __init__(self, cfg: ModelConfig, seed: int):
        rng = _rng(seed, "image")
        d = cfg.embed_dim
        widths = [3, max(d // 2, 1), d, d]
        self.convs = [Conv2d(rng, widths[i], widths[i + 1], k=3, stride=2) for i in range(3)]
        self.ln_final = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.shared_dim, bias=False)

    def features(self, images: Tensor) -> Tensor:
        x = images
        for conv in self.convs:
            x = ops.relu(conv(x))
        return self.ln_final(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)

    def embed(self, feats: Tensor) -> Tensor:
        return self.proj(feats.mean(axis=(2, 3)))


class TextEncoder(Module):
    """Causal transformer pooled at the end-of-sequence token."""

    def __init__(self, cfg: ModelConfig, seed: int):
        rng = _rng(seed, "text")
        d = cfg.embed_dim
        self.token_embed = param(trunc_normal(rng, (cfg.text_vocab_size, d)))
        self.pos_embed = param(trunc_normal(rng, (cfg.text_context_length, d)))
        self.blocks = [TransformerBlock(rng, d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.shared_dim, bias=False)
        n = cfg.text_context_length
        self._mask = np.triu(np.full((n, n), -1e9), k=1)

    def __call__(self, tokens: np.ndarray, eos_id: int) -> Tensor:
        b, n = tokens.shape
        x = ops.embedding(self.token_embed, tokens) + self.pos_embed
        for block in self.blocks:
            x = block(x, self._mask)
        x = self.ln_final(x)
        is_eos = tokens == eos_id
        # First EOS; sequences without one fall back to the last position.
        eos_pos = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1), n - 1)
        return self.proj(x[np.arange(b), eos_pos])


# ---------------------------------------------------------------------------
# pyramid pooling module and task heads
# ---------------------------------------------------------------------------

class PyramidPooling(Module):
    """Pool to each bin size, 1x1-project, upsample, concatenate with the input, fuse."""

    def __init__(self, rng, dim: int, bins):
        self._bins = tuple(bins)
        branch = dim // len(self._bins)
        self.branches = [Conv2d(rng, dim, branch, k=1) for _ in self._bins]
        self.fuse = Conv2d(rng, dim + branch * len(self._bins), dim, k=1)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        parts = [x]
        for size, conv in zip(self._bins, self.branches):
            pooled = ops.adaptive_avg_pool2d(x, size, size)
            parts.append(ops.nearest_upsample(ops.relu(conv(pooled)), h, w))
        return ops.relu(self.fuse(ops.concat(parts, axis=1)))


class TaskHead(Module):
    def __init__(self, rng, dim: int, channels: int, layers: int, task: str):
        if layers == 1:
            self.convs = [Conv2d(rng, dim, channels, k=1)]
        else:
            self.convs = [Conv2d(rng, dim, dim, k=3), Conv2d(rng, dim, dim, k=3), Conv2d(rng, dim, channels, k=1)]
        self._task = task

    def low_res(self, x: Tensor) -> Tensor:
        """Head output on the feature grid, before upsampling."""
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ops.relu(x)
        if self._task == "surface_normal":
            x = ops.l2_normalize(x, axis=1)
        return x

    def __call__(self, x: Tensor, out_h: int, out_w: int) -> Tensor:
        return ops.nearest_upsample(self.low_res(x), out_h, out_w)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

class ModelBundle(Module):
    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        self.step = 0
        encoder_cls = VitTinyEncoder if config.encoder_kind == "vit_tiny" else CnnTinyEncoder
        self.image = encoder_cls(config, seed)
        self.text = TextEncoder(config, seed)
        self.logit_scale = param(np.array(LOGIT_SCALE_INIT))
        self.psp = None
        self.heads: Dict[str, TaskHead] = {}
        if config.tasks:
            self.psp = PyramidPooling(_rng(seed, "psp"), config.embed_dim, config.psp_bin_sizes)
            for task in config.tasks:
                self.heads[task] = TaskHead(
                    _rng(seed, "head." + task), config.embed_dim, config.task_channels(task),
                    config.head_layers, task,
                )

    def parameter_map(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def encoder_parameter_map(self) -> "OrderedDict[str, Tensor]":
        """Parameters on the embedding path (image/text encoders and logit scale)."""
        return OrderedDict((k, v) for k, v in self.named_parameters() if not k.startswith(("psp.", "heads.")))

    def clamp_logit_scale(self) -> None:
        np.clip(self.logit_scale.data, 0.0, LOGIT_SCALE_MAX, out=self.logit_scale.data)

    def discard_heads(self) -> None:
        """Drop the pyramid module and every task head (they only serve pretraining)."""
        self.psp = None
        self.heads = {}


def build_model(config: ModelConfig, seed: int = 0) -> ModelBundle:
    """Fresh model: truncated-normal(0.02) weights, zero biases, logit scale ln(1/0.07)."""
    config.validate()
    return ModelBundle(config, int(seed))


def _check_images(model: ModelBundle, images) -> Tensor:
    images = images if isinstance(images, Tensor) else Tensor(images)
    s = model.config.image_size
    if images.ndim != 4 or images.shape[1:] != (3, s, s):
        raise DimensionError(f"expected images of shape (B, 3, {s}, {s}), got {images.shape}")
    return images


def encode_image(model: ModelBundle, images) -> Tuple[Tensor, Tensor]:
    """Return ``(embedding, features)``: row-normalised embedding and the spatial map."""
    images = _check_images(model, images)
    feats = model.image.features(images)
    emb = ops.l2_normalize(model.image.embed(feats), axis=-1)
    return emb, feats


def image_features(model: ModelBundle, images) -> Tensor:
    return model.image.features(_check_images(model, images))


def encode_text(model: ModelBundle, tokens: np.ndarray, eos_id: Optional[int] = None) -> Tensor:
    from mtclip.synthdata.vocab import default_vocab

    tokens = np.asarray(tokens, dtype=np.int64)
    cfg = model.config
    if tokens.ndim != 2 or tokens.shape[1] != cfg.text_context_length:
        raise DimensionError(f"expected tokens of shape (B, {cfg.text_context_length}), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.text_vocab_size):
        raise InputError(f"token id out of range [0, {cfg.text_vocab_size})")
    eos = default_vocab().eos_id if eos_id is None else eos_id
    return ops.l2_normalize(model.text(tokens, eos), axis=-1)


def psp_forward(model: ModelBundle, features: Tensor) -> Tensor:
    if model.psp is None:
        raise UsageError("model has no multi-scale module (no tasks enabled)")
    cfg = model.config
    if features.ndim != 4 or features.shape[1] != cfg.embed_dim:
        raise DimensionError(f"expected features with {cfg.embed_dim} channels, got {features.shape}")
    return model.psp(features)


def task_head_forward(model: ModelBundle, task: str, fused: Tensor, out_h: int, out_w: int) -> Tensor:
    if task not in model.heads:
        raise UsageError(f"task {task!r} is not enabled on this model")
    return model.heads[task](fused, out_h, out_w)


def task_head_low_res(model: ModelBundle, task: str, fused: Tensor) -> Tensor:
    """``task_head_forward`` without the final nearest upsampling."""
    if task not in model.heads:
        raise UsageError(f"task {task!r} is not enabled on this model")
    return model.heads[task].low_res(fused)
