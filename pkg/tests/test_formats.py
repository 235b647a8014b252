import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from suites import checkpoint_corruptions, detected, shard_corruptions, shard_roundtrip_ok
from mtclip import config as cfgio
from mtclip.errors import CheckpointError, ConfigError, FormatError
from mtclip.models import ModelConfig, build_model, encode_image, encode_text
from mtclip.synthdata import GeneratorConfig, OracleConfig, generate_samples, make_pseudo_labels, read_shard, write_shard
from mtclip.synthdata.shards import _HEADER, load_arrays, read_manifest, stack_samples, write_manifest
from mtclip.synthdata.vocab import tokenize_batch
from mtclip.trainer.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint


@pytest.fixture(scope="module")
def data():
    samples, seeds = generate_samples(GeneratorConfig(image_size=32), 6, 3)
    pseudo = [make_pseudo_labels(s, OracleConfig(), k) for s, k in zip(samples, seeds)]
    return samples, pseudo


def test_shard_roundtrip(tmp_path, data):
    assert shard_roundtrip_ok(tmp_path, *data)
    assert shard_roundtrip_ok(tmp_path, data[0], None)
    assert shard_roundtrip_ok(tmp_path, [], None)


def test_shard_arrays_match_samples(tmp_path, data):
    write_shard(tmp_path / "a.mtcx", *data)
    arrays = load_arrays(tmp_path / "a.mtcx")
    ref = stack_samples(*data)
    np.testing.assert_array_equal(arrays.images(np.arange(6)), np.stack([s.image for s in data[0]]).astype(np.float64))
    for f in ("pixels", "gt_mask", "gt_disparity", "gt_normals", "pseudo_mask", "pseudo_disparity", "pseudo_normals"):
        assert getattr(arrays, f).tobytes() == getattr(ref, f).tobytes()


def test_shard_wrong_magic(tmp_path, data):
    raw = bytearray(write_shard(tmp_path / "a.mtcx", *data).read_bytes())
    raw[0:4] = b"XXXX"
    (tmp_path / "a.mtcx").write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        read_shard(tmp_path / "a.mtcx")
    assert exc.value.offset == 0


def test_shard_count_mismatch_reports_offset(tmp_path, data):
    raw = bytearray(write_shard(tmp_path / "a.mtcx", *data).read_bytes())
    raw[6:10] = (7).to_bytes(4, "little")
    (tmp_path / "a.mtcx").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="record 6 of 7") as exc:
        read_shard(tmp_path / "a.mtcx")
    assert exc.value.offset == len(raw)
    raw[6:10] = (5).to_bytes(4, "little")
    (tmp_path / "a.mtcx").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="trailing"):
        read_shard(tmp_path / "a.mtcx")


def test_shard_corruptions_all_detected(tmp_path, data):
    raw = write_shard(tmp_path / "a.mtcx", *data).read_bytes()
    cases = shard_corruptions(raw)
    hits, misses = detected(read_shard, tmp_path / "bad.mtcx", cases, FormatError)
    assert not misses and hits == len(cases)


def test_manifest_roundtrip(tmp_path):
    write_manifest(tmp_path / "a.mtcx", {"count": "3", "generator.image_size": "64"})
    assert read_manifest(tmp_path / "a.mtcx") == {"count": "3", "generator.image_size": "64"}


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.data())
def test_shard_random_truncation_detected(tmp_path, data, hyp):
    raw = write_shard(tmp_path / "a.mtcx", *data).read_bytes()
    cut = hyp.draw(st.integers(0, len(raw) - 1))
    (tmp_path / "t.mtcx").write_bytes(raw[:cut])
    with pytest.raises(FormatError):
        read_shard(tmp_path / "t.mtcx")


# --------------------------------------------------------------- checkpoints

@pytest.fixture(scope="module")
def small_model():
    return build_model(ModelConfig(image_size=32, embed_dim=16, num_heads=2), 5)


def test_checkpoint_roundtrip_forward(tmp_path, small_model):
    m = small_model
    path = save_checkpoint(m, tmp_path / "m.mtck", step=17)
    back = load_checkpoint(path, m.config)
    assert back.step == 17 and back.seed == 5
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p2.data, p1.data.astype(np.float32).astype(np.float64))
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    toks = tokenize_batch(["a red circle", "a ring"])
    np.testing.assert_allclose(encode_image(back, x)[0].data, encode_image(m, x)[0].data, atol=1e-5)
    np.testing.assert_allclose(encode_text(back, toks).data, encode_text(m, toks).data, atol=1e-5)


def test_checkpoint_idempotent(tmp_path, small_model):
    p1 = save_checkpoint(small_model, tmp_path / "a.mtck")
    p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "b.mtck")
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_digest_mismatch(tmp_path, small_model):
    path = save_checkpoint(small_model, tmp_path / "m.mtck")
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path, dataclasses.replace(small_model.config, head_layers=3))


def test_checkpoint_head_subset_absent(tmp_path):
    m = build_model(ModelConfig(image_size=32, embed_dim=16, num_heads=2, tasks=("segmentation",)), 0)
    ck = read_checkpoint(save_checkpoint(m, tmp_path / "m.mtck"))
    heads = {k.split(".")[1] for k in ck.arrays if k.startswith("heads.")}
    assert heads == {"segmentation"}


def test_checkpoint_corruptions_all_detected(tmp_path, small_model):
    raw = save_checkpoint(small_model, tmp_path / "m.mtck").read_bytes()
    cases = checkpoint_corruptions(raw)
    hits, misses = detected(read_checkpoint, tmp_path / "bad.mtck", cases, CheckpointError)
    assert not misses and hits == len(cases)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.data())
def test_checkpoint_any_byte_flip_detected(tmp_path, hyp):
    arrays = {"w": np.arange(6, dtype=float).reshape(2, 3), "b": np.ones(2)}
    raw = write_checkpoint(tmp_path / "x.mtck", arrays, "a=1\n", 3, 4).read_bytes()
    i = hyp.draw(st.integers(0, len(raw) - 1))
    bit = hyp.draw(st.integers(0, 7))
    b = bytearray(raw)
    b[i] ^= 1 << bit
    (tmp_path / "y.mtck").write_bytes(bytes(b))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "y.mtck")


def test_generic_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.float32([[1.5, -2.0]]).astype(float), "scalar": np.array(3.25)}
    ck = read_checkpoint(write_checkpoint(tmp_path / "g.mtck", arrays, "k=v\n", 9, -1))
    assert ck.step == 9 and ck.seed == -1 and ck.config_text == "k=v\n"
    assert list(ck.arrays) == ["a", "scalar"]
    np.testing.assert_array_equal(ck.arrays["a"], arrays["a"])
    assert ck.arrays["scalar"].shape == ()


# --------------------------------------------------------------- flat configs

def test_config_roundtrip_and_errors():
    cfg = ModelConfig(encoder_kind="cnn_tiny", psp_bin_sizes=(1, 3), tasks=("depth",))
    assert cfgio.from_flat(ModelConfig, cfgio.parse_text(cfgio.dumps(cfg))) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        cfgio.from_flat(ModelConfig, {"bogus": "1"})
    with pytest.raises(ConfigError, match="embed_dim"):
        cfgio.from_flat(ModelConfig, {"embed_dim": "many"})
    with pytest.raises(ConfigError, match="line 2"):
        cfgio.parse_text("a=1\nnot a pair\n")


def test_nested_config_keeps_enclosing_default():
    from mtclip.experiments import ExperimentConfig

    exp = cfgio.from_flat(ExperimentConfig, {"pretrain.epochs": "3"})
    assert exp.pretrain.epochs == 3
    assert exp.pretrain.schedule == ExperimentConfig().pretrain.schedule
