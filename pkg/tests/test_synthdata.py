import dataclasses
import math
import re

import numpy as np
import pytest
from scipy.stats import chisquare

from mtclip.synthdata import (
    COLOR_NAMES,
    NUM_CLASSES,
    SHAPES,
    GeneratorConfig,
    OracleConfig,
    default_vocab,
    generate_samples,
    make_pseudo_labels,
    render_scene,
    sample_scene,
    tokenize,
)
from mtclip.synthdata.oracle import boundary_band
from mtclip.synthdata.scenes import FAR_DISPARITY, ObjectSpec, SceneSpec, render_layers, shape_class, shape_mask
from mtclip.errors import ConfigError


@pytest.fixture(scope="module")
def samples():
    return generate_samples(GeneratorConfig(), 60, 11)


def _class_draws(config, scenes, base):
    counts = np.zeros(len(SHAPES))
    for i in range(scenes):
        for obj in sample_scene(config, base + i).objects:
            counts[SHAPES.index(obj.shape)] += 1
    return counts


def test_sample_scene_deterministic():
    assert sample_scene(GeneratorConfig(), 42) == sample_scene(GeneratorConfig(), 42)
    assert sample_scene(GeneratorConfig(), 42) != sample_scene(GeneratorConfig(), 43)


def test_scene_invariants():
    cfg = GeneratorConfig()
    for seed in range(200):
        spec = sample_scene(cfg, seed)
        assert 1 <= len(spec.objects) <= 4
        depths = [o.depth for o in spec.objects]
        assert depths == sorted(depths)
        for o in spec.objects:
            assert o.size <= o.center[0] <= cfg.image_size - o.size
            assert o.size <= o.center[1] <= cfg.image_size - o.size


def test_uniform_class_frequencies():
    cfg = GeneratorConfig(min_objects=4, max_objects=4)
    counts = _class_draws(cfg, 25_000, 10**6)
    assert counts.sum() == 100_000
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 1 / 8) <= 0.02 / 8), freq


def test_zipf_class_frequencies_chi_square():
    cfg = GeneratorConfig(class_skew="zipf", zipf_s=1.0, min_objects=1, max_objects=1)
    counts = _class_draws(cfg, 10_000, 2 * 10**6)
    expected = (1 / np.arange(1, 9)) / (1 / np.arange(1, 9)).sum() * counts.sum()
    assert chisquare(counts, expected).pvalue > 0.05


def test_generator_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(max_objects=5).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(class_skew="pareto").validate()


def _single(shape="circle", tilt=0.0, center=(32.0, 32.0), size=10.0, depth=0.5):
    obj = ObjectSpec(shape, "red", center, size, depth, tilt, 0.0)
    return SceneSpec("flat", 0.5, (obj,), False, 0)


def test_single_centered_circle():
    s = render_scene(_single())
    ys, xs = np.mgrid[0:64, 0:64] + 0.5
    inside = (xs - 32) ** 2 + (ys - 32) ** 2 <= 100
    np.testing.assert_array_equal(s.gt_mask, np.where(inside, shape_class("circle"), 0))
    assert s.caption == "a red circle"


def test_background_only_scene():
    s = render_scene(SceneSpec("checker", 0.4, (), False, 0))
    assert (s.gt_mask == 0).all()
    assert (s.gt_disparity == np.float32(FAR_DISPARITY)).all()
    assert (s.gt_normals[:2] == 0).all() and (s.gt_normals[2] == 1).all()
    assert s.caption == "a scene"


def test_render_deterministic(samples):
    spec = sample_scene(GeneratorConfig(), 5)
    assert render_scene(spec).equals(render_scene(spec))


def test_sample_contract(samples):
    for s in samples[0]:
        assert s.pixels.dtype == np.uint8 and s.pixels.shape == (3, 64, 64)
        np.testing.assert_allclose(np.linalg.norm(s.gt_normals, axis=0), 1.0, atol=1e-6)
        assert s.gt_disparity.min() >= 0 and s.gt_disparity.max() <= 1
        assert s.valid.all()
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_maps_share_one_owner():
    cfg = GeneratorConfig(min_objects=4, max_objects=4)
    for seed in range(40):
        spec = sample_scene(cfg, seed)
        rgb, mask, disp, normals, owner = render_layers(spec, 64)
        for i, obj in enumerate(spec.objects):
            sel = owner == i
            assert (mask[sel] == shape_class(obj.shape)).all()
            np.testing.assert_allclose(normals[:, sel], obj.normal[:, None] * np.ones((1, sel.sum())), atol=1e-15)
            gx, gy = obj.disparity_gradient(64)
            ys, xs = np.nonzero(sel)
            plane = obj.depth + gx * (xs + 0.5 - obj.center[0]) + gy * (ys + 0.5 - obj.center[1])
            np.testing.assert_allclose(disp[sel], plane, atol=1e-12)
        assert (mask[owner < 0] == 0).all()


def test_overlap_topmost_wins_and_is_nearer():
    cfg = GeneratorConfig(min_objects=4, max_objects=4)
    checked = 0
    for seed in range(60):
        spec = sample_scene(cfg, seed)
        s = 64
        ys, xs = np.mgrid[0:s, 0:s] + 0.5
        _, _, disp, _, owner = render_layers(spec, s)
        for i, lo in enumerate(spec.objects):
            for j in range(i + 1, len(spec.objects)):
                hi = spec.objects[j]
                both = (shape_mask(lo.shape, xs - lo.center[0], ys - lo.center[1], lo.size)
                        & shape_mask(hi.shape, xs - hi.center[0], ys - hi.center[1], hi.size))
                if not both.any():
                    continue
                checked += 1
                assert (owner[both] >= j).all()
                gx, gy = lo.disparity_gradient(s)
                lower = lo.depth + gx * (xs - lo.center[0]) + gy * (ys - lo.center[1])
                assert (disp[both] > lower[both]).all()
    assert checked > 20


_PHRASE = re.compile(r"a (?:(%s) )?(%s)" % ("|".join(COLOR_NAMES), "|".join(SHAPES)))


def test_captions_name_only_visible_objects(samples):
    cfg = GeneratorConfig()
    for sample, seed in zip(*samples):
        spec = sample_scene(cfg, seed)
        _, _, _, _, owner = render_layers(spec, 64)
        for color, shape in _PHRASE.findall(sample.caption.replace("a photo of ", "")):
            ok = False
            for i, obj in enumerate(spec.objects):
                if obj.shape == shape and (not color or obj.color == color):
                    ok |= (owner == i).sum() >= cfg.min_caption_area
            assert ok, sample.caption
            assert (sample.gt_mask == shape_class(shape)).sum() >= cfg.min_caption_area


# --------------------------------------------------------------- oracle

def test_zero_noise_is_identity(samples):
    quiet = OracleConfig(0.0, 0.0, 0.0, 0.0)
    for s in samples[0][:10]:
        p = make_pseudo_labels(s, quiet, 3)
        assert np.array_equal(p.mask, s.gt_mask) and np.array_equal(p.disparity, s.gt_disparity)
        assert np.array_equal(p.normals, s.gt_normals)


def test_zero_normal_jitter_bitwise(samples):
    p = make_pseudo_labels(samples[0][0], OracleConfig(normal_jitter_deg=0.0), 1)
    assert p.normals.tobytes() == samples[0][0].gt_normals.tobytes()


def test_oracle_deterministic(samples):
    s = samples[0][3]
    assert make_pseudo_labels(s, OracleConfig(), 9).equals(make_pseudo_labels(s, OracleConfig(), 9))
    assert not make_pseudo_labels(s, OracleConfig(), 9).equals(make_pseudo_labels(s, OracleConfig(seed=1), 9))


def test_uniform_flip_agreement(samples):
    cfg = OracleConfig(seg_boundary_flip_rate=0.0, seg_uniform_flip_rate=1.0)
    agree = total = 0
    for k, s in enumerate(samples[0]):
        interior = ~boundary_band(s.gt_mask)
        p = make_pseudo_labels(s, cfg, k)
        agree += (p.mask[interior] == s.gt_mask[interior]).sum()
        total += interior.sum()
    assert abs(agree / total - 1 / NUM_CLASSES) < 0.005


def test_boundary_flips_stay_in_band(samples):
    cfg = OracleConfig(seg_boundary_flip_rate=1.0, seg_uniform_flip_rate=0.0)
    for k, s in enumerate(samples[0][:20]):
        p = make_pseudo_labels(s, cfg, k)
        band = boundary_band(s.gt_mask)
        assert (p.mask[~band] == s.gt_mask[~band]).all()
        assert (p.mask[band] != s.gt_mask[band]).all()


def test_disparity_noise_unbiased(samples):
    sigma = 0.05
    eps = []
    for k, s in enumerate(samples[0]):
        p = make_pseudo_labels(s, OracleConfig(disparity_noise_sigma=sigma), k)
        keep = (s.gt_disparity > 0) & (p.disparity < 1)
        eps.append(p.disparity[keep].astype(np.float64) / s.gt_disparity[keep] - 1)
    eps = np.concatenate(eps)
    assert abs(eps.mean()) < 3 * sigma / math.sqrt(len(eps))
    assert abs(eps.std() / sigma - 1) < 0.02


def test_normal_jitter_angle_distribution(samples):
    s = samples[0][0]
    p = make_pseudo_labels(s, OracleConfig(normal_jitter_deg=10.0), 2)
    cos = np.clip((p.normals.astype(np.float64) * s.gt_normals).sum(axis=0), -1, 1)
    ang = np.degrees(np.arccos(cos)).ravel()
    np.testing.assert_allclose(np.linalg.norm(p.normals, axis=0), 1.0, atol=1e-6)
    # A rotation by theta about a uniform random axis moves a vector by about
    # theta * sin(psi), psi the axis-vector angle; E[sin^2 psi] = 2/3.
    assert abs(math.sqrt((ang ** 2).mean()) - 10.0 * math.sqrt(2 / 3)) < 0.3


def test_oracle_validation():
    with pytest.raises(ConfigError):
        OracleConfig(seg_boundary_flip_rate=1.5).validate()
    with pytest.raises(ConfigError):
        OracleConfig(normal_jitter_deg=-1).validate()


# --------------------------------------------------------------- tokenizer

def test_tokenize_examples():
    v = default_vocab()
    assert len(v) == 41
    empty = tokenize("")
    assert list(empty[:2]) == [v.bos_id, v.eos_id] and (empty[2:] == v.pad_id).all()
    ids = tokenize("a red circle")
    assert list(ids[:5]) == [v.bos_id, v.index["a"], v.index["red"], v.index["circle"], v.eos_id]
    assert list(ids[:5]) == [1, 4, 27, 33, 2]
    assert tokenize("a zebra")[2] == v.unk_id
    long = tokenize(" ".join(["a"] * 40), context_length=8)
    assert len(long) == 8 and long[-1] == v.eos_id


def test_every_caption_word_in_vocab(samples):
    v = default_vocab()
    for s in samples[0]:
        assert all(w in v for w in s.caption.split()), s.caption
