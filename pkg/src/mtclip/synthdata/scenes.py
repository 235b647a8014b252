"""Procedural scenes with exact dense ground truth.

Objects are flat shapes lying on tilted planes. Each object owns a disparity
plane ``d0 + gx*(x - cx) + gy*(y - cy)`` whose gradient points against the
image-plane part of its unit normal, so disparity and normals agree. Objects
are painted far-to-near and their depth levels are spaced far enough apart
that the nearer object's disparity dominates wherever two objects overlap.

Coordinates: x to the right, y down, z toward the camera; pixel centres sit at
half-integer positions.
"""

from __future__ import annotations

import dataclasses
import math
from typing import List, Optional, Tuple

import numpy as np

SHAPES = ("circle", "square", "triangle", "diamond", "hexagon", "star", "cross", "ring")
COLORS = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.92, 0.85, 0.15),
    "purple": (0.6, 0.2, 0.75),
    "orange": (0.95, 0.55, 0.1),
}
COLOR_NAMES = tuple(COLORS)
NUM_CLASSES = len(SHAPES) + 1
BACKGROUND_KINDS = ("flat", "stripes", "checker", "gradient")

FAR_DISPARITY = 0.15
DEPTH_LEVEL_START = 0.3
DEPTH_LEVEL_STEP = 0.15
DEPTH_LEVEL_JITTER = 0.05
MAX_TILT_DEG = 50.0
LIGHT = np.array([0.4, -0.5, 0.77]) / np.linalg.norm([0.4, -0.5, 0.77])


def shape_class(name: str) -> int:
    return SHAPES.index(name) + 1


@dataclasses.dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    class_skew: str = "uniform"
    zipf_s: float = 1.0
    min_caption_area: int = 12
    caption_prefix_prob: float = 0.5
    caption_color_drop_prob: float = 0.2

    def validate(self) -> "GeneratorConfig":
        from mtclip.errors import ConfigError

        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if not 1 <= self.min_objects <= self.max_objects <= 4:
            raise ConfigError("need 1 <= min_objects <= max_objects <= 4")
        if self.class_skew not in ("uniform", "zipf"):
            raise ConfigError(f"class_skew must be 'uniform' or 'zipf', got {self.class_skew!r}")
        for name in ("caption_prefix_prob", "caption_color_drop_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        return self

    def class_probabilities(self) -> np.ndarray:
        if self.class_skew == "uniform":
            return np.full(len(SHAPES), 1.0 / len(SHAPES))
        w = 1.0 / np.arange(1, len(SHAPES) + 1) ** self.zipf_s
        return w / w.sum()


@dataclasses.dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    center: Tuple[float, float]
    size: float
    depth: float
    tilt: float
    azimuth: float
    name_color: bool = True

    @property
    def normal(self) -> np.ndarray:
        st = math.sin(self.tilt)
        return np.array([st * math.cos(self.azimuth), st * math.sin(self.azimuth), math.cos(self.tilt)])

    def disparity_gradient(self, image_size: int) -> Tuple[float, float]:
        kappa = 0.05 / (0.25 * image_size)
        n = self.normal
        return -kappa * n[0] / n[2], -kappa * n[1] / n[2]


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    background: str
    background_level: float
    objects: Tuple[ObjectSpec, ...]
    caption_prefix: bool
    seed: int


@dataclasses.dataclass
class Sample:
    pixels: np.ndarray        # uint8 (3, S, S)
    caption: str
    gt_mask: np.ndarray       # uint8 (S, S), 0 = background
    gt_disparity: np.ndarray  # float32 (S, S)
    gt_normals: np.ndarray    # float32 (3, S, S)
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.gt_mask.shape, dtype=bool)

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / np.float32(255.0)

    @property
    def image_size(self) -> int:
        return self.gt_mask.shape[0]

    def dominant_class(self) -> int:
        counts = np.bincount(self.gt_mask.reshape(-1), minlength=NUM_CLASSES)
        counts[0] = 0
        return int(counts.argmax()) if counts.any() else 0

    def equals(self, other: "Sample") -> bool:
        return (
            self.caption == other.caption
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("pixels", "gt_mask", "gt_disparity", "gt_normals", "valid")
            )
        )


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------

def sample_scene(config: GeneratorConfig, seed: int) -> SceneSpec:
    """Draw a scene; identical ``(config, seed)`` gives an identical spec."""
    config.validate()
    rng = np.random.default_rng(seed)
    s = config.image_size
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    probs = config.class_probabilities()
    shapes = rng.choice(len(SHAPES), size=n, p=probs)
    colors = rng.integers(0, len(COLOR_NAMES), size=n)
    levels = np.sort(rng.choice(4, size=n, replace=False))
    objects = []
    for i in range(n):
        r = float(rng.uniform(0.1, 0.22) * s)
        cx = float(rng.uniform(r, s - r))
        cy = float(rng.uniform(r, s - r))
        depth = DEPTH_LEVEL_START + DEPTH_LEVEL_STEP * levels[i] + float(rng.uniform(0, DEPTH_LEVEL_JITTER))
        tilt = math.radians(float(rng.uniform(0.0, MAX_TILT_DEG)))
        azimuth = float(rng.uniform(0.0, 2 * math.pi))
        name_color = bool(rng.random() >= config.caption_color_drop_prob)
        objects.append(ObjectSpec(SHAPES[shapes[i]], COLOR_NAMES[colors[i]], (cx, cy), r, depth, tilt, azimuth,
                                  name_color))
    # painter's order: deepest (smallest disparity) first
    objects.sort(key=lambda o: o.depth)
    return SceneSpec(
        background=BACKGROUND_KINDS[int(rng.integers(len(BACKGROUND_KINDS)))],
        background_level=float(rng.uniform(0.35, 0.6)),
        objects=tuple(objects),
        caption_prefix=bool(rng.random() < config.caption_prefix_prob),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------

def _polygon(n: int, radius: float, start: float = -math.pi / 2, inner: Optional[float] = None):
    if inner is None:
        ang = start + 2 * math.pi * np.arange(n) / n
        return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    ang = start + math.pi * np.arange(2 * n) / n
    rad = np.where(np.arange(2 * n) % 2 == 0, radius, inner)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


def _inside_polygon(dx: np.ndarray, dy: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(dx.shape, dtype=bool)
    x0, y0 = verts[-1]
    for x1, y1 in verts:
        crosses = (y1 > dy) != (y0 > dy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x0 - x1) * (dy - y1) / (y0 - y1) + x1
        inside ^= crosses & (dx < xint)
        x0, y0 = x1, y1
    return inside


def shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if shape == "triangle":
        return _inside_polygon(dx, dy, _polygon(3, r))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "hexagon":
        return _inside_polygon(dx, dy, _polygon(6, r, start=0.0))
    if shape == "star":
        return _inside_polygon(dx, dy, _polygon(5, r, inner=0.45 * r))
    if shape == "cross":
        ax, ay = np.abs(dx), np.abs(dy)
        return ((ax <= 0.3 * r) & (ay <= r)) | ((ay <= 0.3 * r) & (ax <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _background(spec: SceneSpec, s: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    base = spec.background_level
    if spec.background == "flat":
        pattern = np.zeros((s, s))
    elif spec.background == "stripes":
        pattern = np.where((ys.astype(int) // 4) % 2 == 0, 1.0, -1.0)
    elif spec.background == "checker":
        pattern = np.where(((xs.astype(int) // 8) + (ys.astype(int) // 8)) % 2 == 0, 1.0, -1.0)
    else:
        pattern = (xs + ys) / s - 1.0
    gray = base + 0.08 * pattern
    return np.repeat(gray[None], 3, axis=0)


def _shade(normals: np.ndarray, disparity: np.ndarray) -> np.ndarray:
    lambert = np.maximum(0.0, np.tensordot(LIGHT, normals, axes=(0, 0)))
    return (0.45 + 0.55 * lambert) * (0.75 + 0.25 * disparity)


def render_layers(spec: SceneSpec, image_size: int):
    """Rasterise the scene. Returns (rgb, mask, disparity, normals, owner) in float64/int."""
    s = image_size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    rgb = _background(spec, s, xs, ys) * (0.75 + 0.25 * FAR_DISPARITY)
    mask = np.zeros((s, s), dtype=np.int64)
    disparity = np.full((s, s), FAR_DISPARITY)
    normals = np.zeros((3, s, s))
    normals[2] = 1.0
    owner = np.full((s, s), -1, dtype=np.int64)
    for i, obj in enumerate(spec.objects):
        dx = xs - obj.center[0]
        dy = ys - obj.center[1]
        inside = shape_mask(obj.shape, dx, dy, obj.size)
        gx, gy = obj.disparity_gradient(s)
        plane = obj.depth + gx * dx + gy * dy
        n = obj.normal
        albedo = np.asarray(COLORS[obj.color])[:, None]
        shade = _shade(n[:, None], plane[inside][None])[0] if inside.any() else np.zeros(0)
        rgb[:, inside] = albedo * shade[None]
        mask[inside] = shape_class(obj.shape)
        disparity[inside] = plane[inside]
        normals[:, inside] = n[:, None]
        owner[inside] = i
    return rgb, mask, disparity, normals, owner


def _relation(a: np.ndarray, b: np.ndarray) -> str:
    dx, dy = a[0] - b[0], a[1] - b[1]
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


def caption_for(spec: SceneSpec, owner: np.ndarray, min_area: int) -> str:
    visible = []
    for i, obj in enumerate(spec.objects):
        area = int((owner == i).sum())
        if area >= min_area:
            ys, xs = np.nonzero(owner == i)
            visible.append((area, i, np.array([xs.mean(), ys.mean()])))
    visible.sort(key=lambda t: (-t[0], t[1]))

    def phrase(idx: int) -> str:
        obj = spec.objects[idx]
        return f"a {obj.color} {obj.shape}" if obj.name_color else f"a {obj.shape}"

    if not visible:
        text = "a scene"
    elif len(visible) == 1:
        text = phrase(visible[0][1])
    else:
        (_, ia, ca), (_, ib, cb) = visible[0], visible[1]
        text = f"{phrase(ia)} {_relation(ca, cb)} {phrase(ib)}"
    if spec.caption_prefix:
        text = "a photo of " + text
    return text


def render_scene(spec: SceneSpec, image_size: int = 64, min_caption_area: int = 12) -> Sample:
    """Image, caption and dense maps; every pixel's labels come from its topmost owner."""
    rgb, mask, disparity, normals, owner = render_layers(spec, image_size)
    pixels = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    normals = normals / np.linalg.norm(normals, axis=0, keepdims=True)
    return Sample(
        pixels=pixels,
        caption=caption_for(spec, owner, min_caption_area),
        gt_mask=mask.astype(np.uint8),
        gt_disparity=np.clip(disparity, 0.0, 1.0).astype(np.float32),
        gt_normals=normals.astype(np.float32),
    )


def scene_seed(split_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([split_seed, index]).generate_state(1, dtype=np.uint32)[0])


def generate_samples(config: GeneratorConfig, count: int, split_seed: int) -> Tuple[List[Sample], List[int]]:
    seeds = [scene_seed(split_seed, i) for i in range(count)]
    samples = [render_scene(sample_scene(config, sd), config.image_size, config.min_caption_area) for sd in seeds]
    return samples, seeds
