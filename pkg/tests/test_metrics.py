import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from suites import metric_oracle_errors
from mtclip.errors import ArgumentError, MetricError, ReportError
from mtclip.evaluation import (
    ConfusionAccumulator,
    MetricReport,
    SumCountAccumulator,
    abs_rel,
    angular_accuracy,
    classwise_delta_report,
    miou,
    recall_at_k,
    top1,
)
from mtclip.evaluation.metrics import abs_rel_terms
from mtclip.evaluation.report import read_reports, write_csv, write_jsonl
from mtclip.evaluation.zeroshot import zero_shot_classify
from mtclip.models import ModelConfig, build_model
from mtclip.synthdata.scenes import SHAPES


def test_brute_force_agreement():
    worst = metric_oracle_errors(50, seed=3)
    assert all(v <= 1e-9 for v in worst.values()), worst


# ---------------------------------------------------------------- mIoU

def test_miou_examples():
    gt = np.array([[0, 0], [1, 1]])
    per, m = miou(gt, gt, 2)
    assert m == 1.0 and list(per) == [1.0, 1.0]
    per, m = miou(np.zeros_like(gt), gt, 2)
    assert list(per) == [0.5, 0.0] and m == 0.25
    per, m = miou(np.array([0, 2]), np.array([0, 2]), 4)
    assert np.isnan(per[1]) and np.isnan(per[3]) and m == 1.0


def test_miou_ignore_and_errors():
    per, m = miou(np.array([1, 0, 0]), np.array([1, 255, 0]), 2)
    assert m == 1.0
    with pytest.raises(MetricError):
        miou(np.array([0]), np.array([255]), 2)
    with pytest.raises(ArgumentError):
        miou(np.array([5]), np.array([0]), 2)


def test_streaming_equals_concatenated(rng):
    preds = [rng.integers(0, 5, size=(2, 6, 6)) for _ in range(5)]
    gts = [rng.integers(0, 5, size=(2, 6, 6)) for _ in range(5)]
    whole = ConfusionAccumulator(5).update(np.concatenate(preds), np.concatenate(gts))
    streamed = ConfusionAccumulator(5)
    for p, g in zip(preds, gts):
        streamed.update(p, g)
    parts = [ConfusionAccumulator(5).update(p, g) for p, g in zip(preds, gts)]
    merged = parts[4].merge(parts[2]).merge(parts[0].merge(parts[3])).merge(parts[1])
    assert np.array_equal(whole.matrix, streamed.matrix) and np.array_equal(whole.matrix, merged.matrix)
    assert whole.miou() == streamed.miou() == merged.miou()


def test_sum_count_merge():
    a = SumCountAccumulator().add(3.0, 2).merge(SumCountAccumulator(1.0, 2))
    assert a.value() == 1.0
    with pytest.raises(MetricError):
        SumCountAccumulator().value()


# ---------------------------------------------------------------- abs_rel

def test_abs_rel_examples(rng):
    gt = rng.uniform(0.1, 1.0, size=(2, 1, 4, 4))
    assert abs_rel(gt, gt) == pytest.approx(0.0, abs=1e-12)
    assert abs_rel(np.zeros_like(gt[:1]), np.full_like(gt[:1], 0.5)) == 0.0


def test_abs_rel_doubled_depth_is_one(rng, monkeypatch):
    # with the alignment pinned to identity, halved disparity means doubled depth
    import mtclip.evaluation.metrics as M

    monkeypatch.setattr(M, "ssi_scale_shift", lambda p, g, m: (np.ones(len(p)), np.zeros(len(p))))
    gt = rng.uniform(0.1, 1.0, size=(2, 1, 3, 3))
    assert abs_rel(gt / 2.0, gt) == pytest.approx(1.0, abs=1e-12)


def test_abs_rel_affine_invariant_and_errors(rng):
    gt = rng.uniform(0.1, 1.0, size=(1, 1, 5, 5))
    pred = gt + rng.normal(0, 0.05, gt.shape)
    assert abs_rel(3.0 * pred - 0.4, gt) == pytest.approx(abs_rel(pred, gt), abs=1e-12)
    with pytest.raises(MetricError):
        abs_rel(pred, gt, np.zeros(gt.shape, bool))
    with pytest.raises(MetricError):
        abs_rel(pred, -gt)


# ---------------------------------------------------------------- a<30

def _rotated(gt, deg):
    # rotate every normal about an axis perpendicular to it
    axis = np.cross(gt, np.array([0.0, 0.0, 1.0])[None, :, None, None], axis=1)
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    t = math.radians(deg)
    return gt * math.cos(t) + np.cross(axis, gt, axis=1) * math.sin(t)


def test_angular_accuracy_examples(rng):
    gt = rng.normal(size=(1, 3, 4, 4))
    gt[:, 2] = np.abs(gt[:, 2]) * 0.1 + 0.1
    gt /= np.linalg.norm(gt, axis=1, keepdims=True)
    assert angular_accuracy(gt, gt) == 100.0
    assert angular_accuracy(-gt, gt) == 0.0
    assert angular_accuracy(_rotated(gt, 29.0), gt) == 100.0
    assert angular_accuracy(_rotated(gt, 31.0), gt) == 0.0
    with pytest.raises(MetricError):
        angular_accuracy(gt, gt, valid=np.zeros((1, 4, 4), bool))


# ---------------------------------------------------------------- top1

def test_top1_examples():
    labels = np.array([0, 2, 1])
    assert top1(np.eye(3)[labels], labels) == 100.0
    assert top1(np.eye(3)[(labels + 1) % 3], labels) == 0.0
    assert top1(np.zeros((2, 4)), np.array([0, 0])) == 100.0
    assert top1(np.zeros((2, 4)), np.array([1, 0])) == 50.0
    with pytest.raises(MetricError):
        top1(np.zeros((0, 3)), np.zeros(0, int))


# ---------------------------------------------------------------- recall@k

def test_recall_examples(rng):
    emb = rng.normal(size=(12, 6))
    assert recall_at_k(emb, emb, 1) == {"image_to_text": 100.0, "text_to_image": 100.0}
    assert recall_at_k(emb, rng.normal(size=(12, 6)), 12) == {"image_to_text": 100.0, "text_to_image": 100.0}
    with pytest.raises(ArgumentError):
        recall_at_k(emb, emb, 13)


def test_recall_reversed_similarity_is_zero():
    # unit vectors on a circle; each text sits opposite its image, so its match
    # is the least similar of all n candidates
    n, k = 12, 5
    ang = 2 * np.pi * np.arange(n) / n
    img = np.stack([np.cos(ang), np.sin(ang)], 1)
    r = recall_at_k(img, -img, k)
    assert r == {"image_to_text": 0.0, "text_to_image": 0.0}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 15))
def test_recall_monotone_in_k(seed, n):
    rng = np.random.default_rng(seed)
    img, txt = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    prev = {"image_to_text": -1.0, "text_to_image": -1.0}
    for k in range(1, n + 1):
        cur = recall_at_k(img, txt, k)
        assert all(cur[d] >= prev[d] for d in cur)
        prev = cur


# ---------------------------------------------------------------- zero-shot

@pytest.fixture(scope="module")
def zs_model():
    return build_model(ModelConfig(image_size=32, embed_dim=16, num_heads=2), 2)


def test_zeroshot_permutation_and_duplicates(zs_model, rng):
    images = rng.random((6, 3, 32, 32))
    names = list(SHAPES)
    base = zero_shot_classify(zs_model, names, "a photo of a {}", images)
    perm = rng.permutation(len(names))
    shuffled = zero_shot_classify(zs_model, [names[i] for i in perm], "a photo of a {}", images)
    assert [names[perm[p]] for p in shuffled.predictions] == [names[p] for p in base.predictions]
    dup = zero_shot_classify(zs_model, [names[0], names[0]], "a photo of a {}", images)
    assert np.array_equal(dup.scores[:, 0], dup.scores[:, 1]) and not dup.predictions.any()


def test_zeroshot_scale_invariance(zs_model, rng):
    images = rng.random((5, 3, 32, 32))
    res = zero_shot_classify(zs_model, list(SHAPES), "a photo of a {}", images, labels=np.arange(5))
    assert np.array_equal(np.argmax(res.scores * 7.3, axis=1), res.predictions)
    assert res.top1 == top1(res.scores, np.arange(5))


def test_zeroshot_unknown_word_logged(zs_model, rng, caplog):
    zero_shot_classify(zs_model, ["zeppelin"], "a photo of a {}", rng.random((1, 3, 32, 32)))
    assert "out-of-vocabulary" in caplog.text


# ---------------------------------------------------------------- reports

def _report(values):
    return MetricReport("segmentation", "miou", float(np.nanmean(list(values.values()))), dict(values))


def test_classwise_delta():
    a = _report({"circle": 0.5, "ring": 0.25})
    b = _report({"circle": 0.75, "ring": 0.0})
    assert all(r["delta"] == 0 for r in classwise_delta_report(a, a))
    rows = classwise_delta_report(a, b, {"circle": 30, "ring": 70})
    assert [(r["class"], r["delta"]) for r in rows] == [("circle", 0.25), ("ring", -0.25)]
    assert sum(r["frequency"] for r in rows) == 100
    with pytest.raises(ReportError):
        classwise_delta_report(a, _report({"circle": 1.0}))
    with pytest.raises(ReportError):
        classwise_delta_report(a, b, {"circle": 1})


def test_report_per_class_mean_matches_headline(rng):
    acc = ConfusionAccumulator(6).update(rng.integers(0, 6, 200), rng.integers(0, 4, 200))
    per = acc.per_class_iou()
    rep = MetricReport("segmentation", "miou", acc.miou(), {str(i): float(v) for i, v in enumerate(per)})
    present = [v for v in rep.per_class.values() if not math.isnan(v)]
    assert abs(sum(present) / len(present) - rep.value) <= 1e-9


def test_report_jsonl_csv_roundtrip(tmp_path):
    rep = MetricReport("segmentation", "miou", 0.5, {"a": float("nan"), "b": 1.0}, 10, "ab", 3, {"x": 1})
    back = read_reports(write_jsonl(tmp_path / "r.jsonl", [rep]))[0]
    assert back.value == 0.5 and math.isnan(back.per_class["a"]) and back.extra == {"x": 1}
    (tmp_path / "bad.jsonl").write_text("{oops\n")
    with pytest.raises(ReportError, match=":1:"):
        read_reports(tmp_path / "bad.jsonl")
    text = write_csv(tmp_path / "t.csv", [{"a": 1, "b": 2}]).read_text()
    assert text.splitlines() == ["a,b", "1,2"]
