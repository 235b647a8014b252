import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtclip import losses as L
from mtclip.errors import ConfigError, DimensionError, InputError
from mtclip.models import LOGIT_SCALE_INIT
from mtclip.tensor import Tensor, ops


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def rotation(axis, angle):
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def rotated_field(rng, shape, angle):
    """Unit normals and copies rotated by exactly ``angle`` about a perpendicular axis."""
    b, h, w = shape
    n = unit_rows(rng.normal(size=(b * h * w, 3)))
    helper = unit_rows(rng.normal(size=n.shape))
    perp = unit_rows(np.cross(n, helper))
    rot = n * math.cos(angle) + np.cross(perp, n) * math.sin(angle)
    to_map = lambda v: v.reshape(b, h, w, 3).transpose(0, 3, 1, 2)
    return to_map(n), to_map(rot)


# --------------------------------------------------------------- contrastive

def contrastive_oracle(img, txt, scale):
    logits = math.exp(scale) * img @ txt.T
    def ce(z):
        z = z - z.max(axis=1, keepdims=True)
        return -np.mean(np.diag(z) - np.log(np.exp(z).sum(axis=1)))
    return 0.5 * (ce(logits) + ce(logits.T))


def test_contrastive_single_pair_is_zero():
    e = Tensor(unit_rows(np.ones((1, 4))))
    assert L.clip_contrastive_loss(e, e, LOGIT_SCALE_INIT).item() == 0.0


@pytest.mark.parametrize("b", [2, 4, 9])
def test_contrastive_identical_rows_is_ln_b(b):
    e = Tensor(np.tile(unit_rows(np.arange(1.0, 6.0)[None]), (b, 1)))
    assert abs(L.clip_contrastive_loss(e, e, LOGIT_SCALE_INIT).item() - math.log(b)) < 1e-12


@pytest.mark.parametrize("b", [2, 4, 8])
def test_contrastive_orthonormal_closed_form(b):
    q, _ = np.linalg.qr(np.random.default_rng(b).normal(size=(16, 16)))
    e = Tensor(q[:b])
    s = math.exp(LOGIT_SCALE_INIT)
    expected = -math.log(math.exp(s) / (math.exp(s) + b - 1))
    assert abs(L.clip_contrastive_loss(e, e, LOGIT_SCALE_INIT).item() - expected) < 1e-6
    assert abs(L.clip_contrastive_loss(e, e, 0.0).item() - (-math.log(math.e / (math.e + b - 1)))) < 1e-12


def test_contrastive_matches_oracle(rng):
    for _ in range(10):
        a, t = unit_rows(rng.normal(size=(6, 5))), unit_rows(rng.normal(size=(6, 5)))
        s = float(rng.uniform(0, 4))
        assert abs(L.clip_contrastive_loss(Tensor(a), Tensor(t), s).item() - contrastive_oracle(a, t, s)) < 1e-12


def test_contrastive_errors():
    with pytest.raises(InputError):
        L.clip_contrastive_loss(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))), 0.0)
    with pytest.raises(DimensionError):
        L.clip_contrastive_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 0.0)


def test_contrastive_random_embeddings_near_ln_b():
    vals = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        a, t = unit_rows(r.normal(size=(64, 32))), unit_rows(r.normal(size=(64, 32)))
        vals.append(L.clip_contrastive_loss(Tensor(a), Tensor(t), 0.0).item())
    assert abs(np.mean(vals) / math.log(64) - 1) < 0.15


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.floats(0, 4.6), st.integers(0, 2**31))
def test_contrastive_joint_permutation_invariant(b, d, s, seed):
    r = np.random.default_rng(seed)
    a, t = unit_rows(r.normal(size=(b, d))), unit_rows(r.normal(size=(b, d)))
    p = r.permutation(b)
    base = L.clip_contrastive_loss(Tensor(a), Tensor(t), s).item()
    assert abs(L.clip_contrastive_loss(Tensor(a[p]), Tensor(t[p]), s).item() - base) < 1e-12


# --------------------------------------------------------------- segmentation

def test_segmentation_ce_examples():
    mask = np.array([[[0, 1], [2, 0]]])
    assert abs(L.segmentation_ce(Tensor(np.zeros((1, 3, 2, 2))), mask).item() - math.log(3)) < 1e-12
    sharp = np.full((1, 3, 2, 2), -50.0)
    for y in range(2):
        for x in range(2):
            sharp[0, mask[0, y, x], y, x] = 50.0
    assert L.segmentation_ce(Tensor(sharp), mask).item() < 1e-40


def test_segmentation_ce_hand_built():
    logits = np.array([[[[1.0, -1.0], [0.5, 2.0]], [[0.0, 3.0], [0.5, -2.0]]]])  # (1, 2, 2, 2)
    mask = np.array([[[0, 1], [1, 255]]])
    per_pixel = []
    for y, x in [(0, 0), (0, 1), (1, 0)]:
        z = logits[0, :, y, x]
        per_pixel.append(-(z[mask[0, y, x]] - math.log(math.exp(z[0]) + math.exp(z[1]))))
    assert abs(L.segmentation_ce(Tensor(logits), mask).item() - sum(per_pixel) / 3) < 1e-12


def test_segmentation_all_ignored_warns():
    with pytest.warns(L.EmptySupervisionWarning):
        out = L.segmentation_ce(Tensor(np.ones((1, 2, 2, 2))), np.full((1, 2, 2), 255))
    assert out.item() == 0.0
    with pytest.warns(L.EmptySupervisionWarning):
        L.segmentation_ce_upsampled(Tensor(np.ones((1, 2, 1, 1))), np.full((1, 2, 2), 255))


def test_cell_counts_reject_bad_ids():
    with pytest.raises(InputError):
        L.nearest_cell_counts(np.array([[[0, 7]]]), 3, 1, 1)


def test_cell_counts_conserve_pixels(rng):
    mask = rng.integers(0, 4, size=(2, 13, 11))
    counts = L.nearest_cell_counts(mask, 4, 4, 3)
    assert counts.sum() == mask.size
    np.testing.assert_array_equal(counts.sum(axis=(2, 3)), [[np.sum(m == c) for c in range(4)] for m in mask])


# --------------------------------------------------------------- l1

def test_l1_examples(rng):
    t = rng.normal(size=(2, 3, 4, 4))
    assert L.l1_dense(Tensor(t), t).item() == 0.0
    assert abs(L.l1_dense(Tensor(t + 0.5), t).item() - 0.5) < 1e-12
    p, q = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))
    valid = rng.random((1, 3, 3)) < 0.6
    valid[0, 0, 0] = True
    ref = sum(abs(p[0, c, y, x] - q[0, c, y, x]) for c in range(2) for y in range(3) for x in range(3) if valid[0, y, x])
    assert abs(L.l1_dense(Tensor(p), q, valid).item() - ref / (2 * valid.sum())) < 1e-12


def test_l1_empty_and_shape_errors():
    with pytest.warns(L.EmptySupervisionWarning):
        assert L.l1_dense(Tensor(np.ones((1, 1, 2, 2))), np.zeros((1, 1, 2, 2)), np.zeros((1, 2, 2), bool)).item() == 0
    with pytest.raises(DimensionError):
        L.l1_dense(Tensor(np.ones((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


# --------------------------------------------------------------- combined

def _comps(clip=2.0, seg=1.0, depth=0.5, sn=0.5):
    return {"clip": Tensor(np.array(clip)), "segmentation": Tensor(np.array(seg)), "depth": Tensor(np.array(depth)),
            "surface_normal": Tensor(np.array(sn))}


def test_combined_examples():
    rep = L.combined_loss(_comps(), L.LossWeights())
    assert abs(rep.total_value - 3.1) < 1e-12
    assert rep.per_component == {"clip": 2.0, "segmentation": 1.0, "depth": 0.5, "surface_normal": 0.5}
    zero = L.LossWeights(1.0, {"segmentation": 0.0, "depth": 0.0, "surface_normal": 0.0})
    assert L.combined_loss(_comps(), zero).total_value == 2.0
    assert abs(L.combined_loss(_comps(), L.LossWeights().scaled(2.0)).total_value - 6.2) < 1e-12


def test_combined_missing_component():
    comps = _comps()
    del comps["depth"]
    with pytest.raises(ConfigError, match="depth"):
        L.combined_loss(comps, L.LossWeights())


def test_weights_validation():
    with pytest.raises(ConfigError):
        L.LossWeights(-1.0)
    with pytest.raises(ConfigError):
        L.LossWeights(0.0, {"depth": 0.0})


def test_combined_gradient_is_weighted_sum(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    target = rng.normal(size=(2, 3, 4, 4))
    mask = rng.integers(0, 3, size=(2, 4, 4))
    w = L.LossWeights(0.7, {"segmentation": 0.3, "depth": 1.3})

    def comps():
        return {"clip": ops.mean(x * x), "segmentation": L.segmentation_ce(x, mask),
                "depth": L.l1_dense(x, target)}

    L.combined_loss(comps(), w).total.backward()
    total_grad = x.grad.copy()
    parts = []
    for name, lam in (("clip", 0.7), ("segmentation", 0.3), ("depth", 1.3)):
        x.grad = None
        comps()[name].backward()
        parts.append(lam * x.grad)
    np.testing.assert_allclose(total_grad, sum(parts), rtol=0, atol=1e-14)


# --------------------------------------------------------------- SSI

def test_ssi_examples(rng):
    gt = rng.random((2, 1, 5, 5))
    assert L.ssi_probe_loss(Tensor(gt), gt).item() < 1e-12
    assert L.ssi_probe_loss(Tensor(3.0 * gt + 0.7), gt).item() < 1e-9
    assert L.ssi_probe_loss(Tensor(-gt), gt).item() < 1e-12
    s, t = L.ssi_scale_shift(-gt, gt)
    np.testing.assert_allclose(s, -1.0, atol=1e-12)


def test_ssi_degenerate_prediction(rng):
    gt = rng.random((1, 1, 4, 4))
    s, t = L.ssi_scale_shift(np.full_like(gt, 0.3), gt)
    assert s[0] == 0.0 and abs(t[0] - gt.mean()) < 1e-15
    expected = np.abs(gt - gt.mean()).mean()
    assert abs(L.ssi_probe_loss(Tensor(np.full_like(gt, 0.3)), gt).item() - expected) < 1e-12


def test_ssi_matches_lstsq_oracle(rng):
    for _ in range(10):
        p, g = rng.normal(size=(1, 1, 4, 5)), rng.random((1, 1, 4, 5))
        valid = rng.random((1, 4, 5)) < 0.7
        valid[0, :2, 0] = True
        a = np.stack([p[0, 0][valid[0]], np.ones(valid.sum())], axis=1)
        (s, t), *_ = np.linalg.lstsq(a, g[0, 0][valid[0]], rcond=None)
        ref = np.abs(s * p[0, 0][valid[0]] + t - g[0, 0][valid[0]]).mean()
        assert abs(L.ssi_probe_loss(Tensor(p), g, valid).item() - ref) < 1e-12


def test_ssi_needs_two_pixels():
    with pytest.raises(InputError):
        L.ssi_probe_loss(Tensor(np.ones((1, 1, 2, 2))), np.ones((1, 1, 2, 2)), np.eye(2, dtype=bool)[None] & False)


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20).filter(lambda a: abs(a) > 1e-3), st.floats(-20, 20), st.integers(0, 2**31))
def test_ssi_affine_invariance(a, b, seed):
    r = np.random.default_rng(seed)
    pred, gt = r.normal(size=(2, 1, 6, 6)), r.random((2, 1, 6, 6))
    base = L.ssi_probe_loss(Tensor(pred), gt).item()
    assert abs(L.ssi_probe_loss(Tensor(a * pred + b), gt).item() - base) < 1e-7


# --------------------------------------------------------------- angular

def test_angular_examples(rng):
    n, rot = rotated_field(rng, (2, 4, 4), math.radians(30))
    assert L.angular_probe_loss(Tensor(n), n).item() < 1e-7
    assert abs(L.angular_probe_loss(Tensor(-n), n).item() - math.pi) < 1e-6
    assert abs(L.angular_probe_loss(Tensor(rot), n).item() - math.pi / 6) < 1e-6


def test_angular_empty_valid():
    n = np.zeros((1, 3, 2, 2))
    n[:, 2] = 1
    with pytest.warns(L.EmptySupervisionWarning):
        assert L.angular_probe_loss(Tensor(n), n, np.zeros((1, 2, 2), bool)).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, math.pi))
def test_angular_common_rotation_invariance(seed, angle):
    r = np.random.default_rng(seed)
    a = unit_rows(r.normal(size=(12, 3)))
    b = unit_rows(r.normal(size=(12, 3)))
    rot = rotation(r.normal(size=3), angle)
    to_map = lambda v: v.reshape(1, 3, 4, 3).transpose(0, 3, 1, 2)
    base = L.angular_probe_loss(Tensor(to_map(a)), to_map(b)).item()
    moved = L.angular_probe_loss(Tensor(to_map(a @ rot.T)), to_map(b @ rot.T)).item()
    assert abs(base - moved) < 1e-9
