"""Expert-noise oracle: corrupts exact ground truth into hard pseudo-labels."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mtclip.errors import ConfigError
from mtclip.synthdata.scenes import NUM_CLASSES, Sample

BAND_RADIUS = 2


@dataclasses.dataclass(frozen=True)
class OracleConfig:
    seg_boundary_flip_rate: float = 0.2
    seg_uniform_flip_rate: float = 0.02
    disparity_noise_sigma: float = 0.05
    normal_jitter_deg: float = 10.0
    seed: int = 0

    def validate(self) -> "OracleConfig":
        for name in ("seg_boundary_flip_rate", "seg_uniform_flip_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("disparity_noise_sigma", "normal_jitter_deg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self


@dataclasses.dataclass
class PseudoLabelSet:
    mask: np.ndarray       # uint8 (S, S)
    disparity: np.ndarray  # float32 (S, S)
    normals: np.ndarray    # float32 (3, S, S)

    def equals(self, other: "PseudoLabelSet") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("mask", "disparity", "normals"))


def boundary_band(mask: np.ndarray, radius: int = BAND_RADIUS) -> np.ndarray:
    """Pixels with a different class within Chebyshev distance ``radius``."""
    padded = np.pad(mask, radius, mode="edge")
    win = sliding_window_view(padded, (2 * radius + 1, 2 * radius + 1))
    return win.max(axis=(2, 3)) != win.min(axis=(2, 3))


def _flip_boundary(mask, band, rate, rng, radius=BAND_RADIUS):
    out = mask.copy()
    ys, xs = np.nonzero(band & (rng.random(mask.shape) < rate))
    if len(ys) == 0:
        return out
    s = mask.shape[0]
    own = mask[ys, xs]
    chosen = own.copy()
    todo = np.ones(len(ys), dtype=bool)
    for _ in range(16):
        if not todo.any():
            break
        oy = rng.integers(-radius, radius + 1, size=len(ys))
        ox = rng.integers(-radius, radius + 1, size=len(ys))
        cand = mask[np.clip(ys + oy, 0, s - 1), np.clip(xs + ox, 0, s - 1)]
        take = todo & (cand != own)
        chosen[take] = cand[take]
        todo &= ~take
    if todo.any():
        # Rare leftovers: take whichever extreme of the neighbourhood differs.
        padded = np.pad(mask, radius, mode="edge")
        for j in np.nonzero(todo)[0]:
            win = padded[ys[j]:ys[j] + 2 * radius + 1, xs[j]:xs[j] + 2 * radius + 1]
            hi, lo = win.max(), win.min()
            chosen[j] = hi if hi != own[j] else lo
    out[ys, xs] = chosen
    return out


def rotate_normals(normals: np.ndarray, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate each (3, ...) unit vector by N(0, sigma^2) degrees about a uniform random axis."""
    flat = normals.reshape(3, -1).astype(np.float64)
    n = flat.shape[1]
    axis = rng.normal(size=(3, n))
    axis /= np.linalg.norm(axis, axis=0, keepdims=True)
    angle = rng.normal(0.0, math.radians(sigma_deg), size=n)
    c, s = np.cos(angle), np.sin(angle)
    cross = np.cross(axis, flat, axis=0)
    dot = (axis * flat).sum(axis=0)
    rotated = flat * c + cross * s + axis * dot * (1.0 - c)
    rotated /= np.linalg.norm(rotated, axis=0, keepdims=True)
    return rotated.reshape(normals.shape)


def make_pseudo_labels(sample: Sample, oracle: OracleConfig, key: int = 0) -> PseudoLabelSet:
    """Noisy hard labels for one sample.

    ``key`` distinguishes samples that share one oracle config (the generator
    passes the scene seed); the result is a pure function of ``(sample, oracle, key)``.
    """
    oracle.validate()
    streams = np.random.SeedSequence([oracle.seed, key]).spawn(3)
    seg_rng, disp_rng, norm_rng = (np.random.default_rng(s) for s in streams)

    mask = sample.gt_mask.copy()
    if oracle.seg_boundary_flip_rate > 0:
        mask = _flip_boundary(mask, boundary_band(sample.gt_mask), oracle.seg_boundary_flip_rate, seg_rng)
    if oracle.seg_uniform_flip_rate > 0:
        hit = seg_rng.random(mask.shape) < oracle.seg_uniform_flip_rate
        mask[hit] = seg_rng.integers(0, NUM_CLASSES, size=int(hit.sum()))

    if oracle.disparity_noise_sigma > 0:
        eps = disp_rng.normal(0.0, oracle.disparity_noise_sigma, size=sample.gt_disparity.shape)
        disparity = np.clip(sample.gt_disparity.astype(np.float64) * (1.0 + eps), 0.0, 1.0).astype(np.float32)
    else:
        disparity = sample.gt_disparity.copy()

    if oracle.normal_jitter_deg > 0:
        normals = rotate_normals(sample.gt_normals, oracle.normal_jitter_deg, norm_rng).astype(np.float32)
    else:
        normals = sample.gt_normals.copy()

    return PseudoLabelSet(mask=mask.astype(np.uint8), disparity=disparity, normals=normals)
