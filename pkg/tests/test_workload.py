import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import random_cnn, random_mlp
from spikebench.errors import ContractError, LoadError
from spikebench.snn import infer, model_accuracy
from spikebench.workload import (Dataset, _pack_int4, _unpack_int4, generate_synthetic_workload,
                                 load_dataset, load_model, normalize_manifest, random_inputs,
                                 save_dataset, save_model, vgg9_shaped)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-7, 7), min_size=0, max_size=33))
def test_int4_packing_roundtrip(vals):
    q = np.array(vals, dtype=np.int8)
    buf = _pack_int4(q)
    assert len(buf) == (q.size + 1) // 2
    np.testing.assert_array_equal(_unpack_int4(buf, q.size), q)


@pytest.mark.parametrize("bits", [8, 4])
def test_model_roundtrip_preserves_inference(tmp_path, bits):
    model = random_mlp(0, bits=bits, bn=True)
    path = save_model(model, tmp_path / "m.json")
    back = load_model(path)
    xs = np.random.default_rng(0).uniform(size=(5, 12))
    for x in xs:
        a, b = infer(model, x), infer(back, x)
        np.testing.assert_array_equal(a.logits, b.logits)
    for la, lb in zip(model.layers, back.layers):
        np.testing.assert_array_equal(la.weights.q, lb.weights.q)
        assert la.weights.scale == lb.weights.scale


def test_cnn_roundtrip_and_deterministic_bytes(tmp_path):
    model = random_cnn(1)
    p1 = save_model(model, tmp_path / "a" / "m.json")
    p2 = save_model(load_model(p1), tmp_path / "b" / "m.json")
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.with_suffix(".bin").read_bytes() == p2.with_suffix(".bin").read_bytes()
    normalize_manifest(p1)
    assert p1.read_bytes() == p2.read_bytes()


def test_model_load_errors(tmp_path):
    path = save_model(random_mlp(0), tmp_path / "m.json")
    man = json.loads(path.read_text())
    bad = dict(man, format_version=99)
    (tmp_path / "v.json").write_text(json.dumps(bad))
    with pytest.raises(LoadError, match="format_version"):
        load_model(tmp_path / "v.json")
    blob = path.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(LoadError, match="bytes"):
        load_model(path)
    (tmp_path / "j.json").write_text("{not json")
    with pytest.raises(LoadError):
        load_model(tmp_path / "j.json")


@pytest.mark.parametrize("tag", [0, 1, 2])
def test_dataset_roundtrip(tmp_path, tag):
    rng = np.random.default_rng(tag)
    x = np.round(rng.uniform(0, 255, size=(7, 2, 3, 3))) if tag == 0 else rng.uniform(size=(7, 2, 3, 3))
    ds = Dataset(x, rng.integers(0, 5, size=7).astype(np.uint16))
    back = load_dataset(save_dataset(ds, tmp_path / "d.snnb", tag))
    want = x.astype(np.float32).astype(np.float64) if tag == 1 else x
    np.testing.assert_array_equal(back.samples, want)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_dataset_load_errors(tmp_path):
    ds = Dataset(np.zeros((2, 3)), np.zeros(2, dtype=np.uint16))
    p = save_dataset(ds, tmp_path / "d.snnb")
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(LoadError, match="magic"):
        load_dataset(tmp_path / "magic")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(LoadError, match="size"):
        load_dataset(tmp_path / "short")
    with pytest.raises(ContractError):
        save_dataset(ds, tmp_path / "x", dtype_tag=9)
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 3)), np.zeros(3))


@pytest.mark.parametrize("profile", ["tiny-mlp", "tiny-cnn"])
def test_synthetic_workload_is_deterministic_and_exact(profile):
    m1, d1 = generate_synthetic_workload(11, profile)
    m2, d2 = generate_synthetic_workload(11, profile)
    np.testing.assert_array_equal(d1.samples, d2.samples)
    np.testing.assert_array_equal(d1.labels, d2.labels)
    for a, b in zip(m1.layers, m2.layers):
        if a.is_weighted:
            np.testing.assert_array_equal(a.weights.q, b.weights.q)
    assert model_accuracy(m1, d1.samples, d1.labels) == 1.0
    assert np.bincount(d1.labels).tolist() == [16] * m1.num_classes
    # inputs lie on the 8-bit grid the DAC model expects
    np.testing.assert_array_equal(np.round(d1.samples * 255) / 255, d1.samples)


def test_synthetic_workload_rejects_unknown_profile():
    with pytest.raises(ContractError):
        generate_synthetic_workload(0, "resnet")


def test_vgg9_shape_and_inputs():
    model = vgg9_shaped(0, input_hw=8)
    kinds = [l.kind for l in model.layers]
    assert kinds.count("conv2d") == 7 and kinds.count("avgpool") == 3 and kinds.count("fc") == 2
    x = random_inputs(0, model.input_shape, 2)
    assert x.shape == (2, 3, 8, 8)
    infer(model.with_timesteps(1), x[0])


def test_dataset_split_and_subset():
    ds = Dataset(np.arange(10.0).reshape(5, 2), np.arange(5, dtype=np.uint16))
    a, b = ds.split(2)
    assert len(a) == 2 and len(b) == 3
    assert ds.subset([4, 0]).labels.tolist() == [4, 0]
