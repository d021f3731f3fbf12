import gzip
import json
import struct

import numpy as np
import pytest

from defapprox.data import (
    encode_idx,
    load_bundle,
    load_mnist_idx,
    load_weights,
    parse_idx,
    save_bundle,
    save_weights,
    write_idx,
)
from defapprox.errors import BadMagicError, BundleError, CountMismatchError, TruncatedFileError
from defapprox.nn import lenet5

IMG, LAB = 0x803, 0x801


@pytest.fixture
def one_image(tmp_path):
    pixels = np.arange(784, dtype=np.uint32).reshape(28, 28) % 256
    write_idx(tmp_path / "img", pixels[None].astype(np.uint8))
    write_idx(tmp_path / "lab.gz", np.array([7], dtype=np.uint8))
    return tmp_path / "img", tmp_path / "lab.gz", pixels


def test_one_image_fixture(one_image):
    img, lab, pixels = one_image
    ds = load_mnist_idx(img, lab)
    assert ds.images.shape == (1, 1, 28, 28) and ds.labels.tolist() == [7]
    assert np.array_equal(ds.images[0, 0], (pixels / np.float32(255)).astype(np.float32))
    assert ds.images.max() == 1.0 and ds.images.min() == 0.0


def test_labels_with_images_magic_is_rejected(tmp_path):
    raw = struct.pack(">III", IMG, 1, 1) + b"\x00"
    with pytest.raises(BadMagicError):
        parse_idx(raw, LAB)


@pytest.mark.parametrize(
    "raw,error",
    [
        (b"\x00\x00", TruncatedFileError),
        (struct.pack(">I", LAB), TruncatedFileError),
        (struct.pack(">II", LAB, 3) + b"\x01\x02", TruncatedFileError),
        (struct.pack(">II", LAB, 2) + b"\x01\x02\x03", CountMismatchError),
        (struct.pack(">II", 0x0D01, 1) + b"\x01", BadMagicError),
    ],
)
def test_malformed_idx(raw, error):
    with pytest.raises(error):
        parse_idx(raw, LAB)


def test_image_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 28, 28), np.uint8))
    write_idx(tmp_path / "l", np.zeros(3, np.uint8))
    with pytest.raises(CountMismatchError):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


def test_gzip_is_deterministic(tmp_path):
    a = np.arange(10, dtype=np.uint8)
    write_idx(tmp_path / "a.gz", a)
    write_idx(tmp_path / "b.gz", a)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.gz").read_bytes()) == encode_idx(a)


def test_bundle_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    t = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.array([np.nan, -0.0, 1e-45], np.float32)}
    save_bundle(tmp_path / "x", t)
    back, _ = load_bundle(tmp_path / "x")
    for k in t:
        assert back[k].tobytes() == t[k].tobytes()


def test_weights_round_trip(tmp_path):
    m = lenet5(seed=3)
    save_weights(tmp_path / "m", m)
    back = load_weights(tmp_path / "m")
    assert back.layers == m.layers
    assert all(back.weights[k].tobytes() == m.weights[k].tobytes() for k in m.weights)


def _manifest(path):
    return json.loads(path.with_suffix(".json").read_text())


def test_truncated_blob(tmp_path):
    save_bundle(tmp_path / "x", {"w": np.ones(8, np.float32)})
    blob = tmp_path / "x.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(BundleError, match="needs bytes"):
        load_bundle(tmp_path / "x")


def test_overlapping_offsets(tmp_path):
    save_bundle(tmp_path / "x", {"a": np.ones(4, np.float32), "b": np.ones(4, np.float32)})
    m = _manifest(tmp_path / "x")
    m["tensors"][1]["offset"] = 8
    (tmp_path / "x.json").write_text(json.dumps(m))
    with pytest.raises(BundleError, match="overlap"):
        load_bundle(tmp_path / "x")


@pytest.mark.parametrize(
    "edit",
    [
        lambda m: m["tensors"][0].update(length=5),
        lambda m: m["tensors"][0].update(offset=2),
        lambda m: m.update(format="other/1"),
    ],
)
def test_inconsistent_manifest(tmp_path, edit):
    save_bundle(tmp_path / "x", {"a": np.ones(4, np.float32)})
    m = _manifest(tmp_path / "x")
    edit(m)
    (tmp_path / "x.json").write_text(json.dumps(m))
    with pytest.raises(BundleError):
        load_bundle(tmp_path / "x")


def test_unknown_tensor_name(tmp_path):
    m = lenet5(seed=0)
    save_weights(tmp_path / "m", m)
    tensors, meta = load_bundle(tmp_path / "m")
    tensors["99.weight"] = np.zeros(1, np.float32)
    save_bundle(tmp_path / "m", tensors, meta)
    with pytest.raises(BundleError, match="unknown"):
        load_weights(tmp_path / "m")
