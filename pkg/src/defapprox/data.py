"""MNIST IDX parsing and the weight-bundle format (JSON manifest + float32 blob)."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, BundleError, CountMismatchError, TruncatedFileError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
BUNDLE_FORMAT = "defapprox-weights/1"


@dataclass
class MnistSet:
    images: np.ndarray  # (n, 1, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return MnistSet(self.images[idx], self.labels[idx])


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw, expected_magic, name="idx"):
    """Parse an unsigned-byte IDX payload; returns a uint8 array."""
    if len(raw) < 4:
        raise TruncatedFileError(f"{name}: file shorter than its magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{name}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{name}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{name}: expected {count} data bytes, found {len(raw) - header}")
    if len(raw) - header > count:
        raise CountMismatchError(f"{name}: {len(raw) - header - count} trailing bytes after data")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, str(labels_path))
    if images.ndim != 3:
        raise BadMagicError(f"{images_path}: expected 3 dimensions, got {images.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return MnistSet(x, labels.astype(np.int64))


def encode_idx(array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(path, array, compress=None):
    payload = encode_idx(array)
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    path.write_bytes(gzip.compress(payload, mtime=0) if compress else payload)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    for candidate in (stem, stem + ".gz"):
        p = Path(directory) / candidate
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def mnist_paths(directory, split):
    img, lab = MNIST_FILES[split]
    return _find(directory, img), _find(directory, lab)


def load_mnist_dir(directory, split):
    return load_mnist_idx(*mnist_paths(directory, split))


# ---------------------------------------------------------------------------
# weight bundles


def save_bundle(path, tensors, extra=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "length": data.size})
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = {"format": BUNDLE_FORMAT, "blob": path.name + ".bin", "tensors": entries}
    if extra:
        manifest["meta"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / (path.name + ".bin")).write_bytes(b"".join(blobs))
    (path.parent / (path.name + ".json")).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _validate_entries(entries, blob_len):
    spans = []
    for e in entries:
        shape, offset, length = e["shape"], e["offset"], e["length"]
        if int(np.prod(shape)) != length:
            raise BundleError(f"{e['name']}: shape {shape} does not hold {length} values")
        if offset % 4 or offset < 0:
            raise BundleError(f"{e['name']}: misaligned offset {offset}")
        end = offset + 4 * length
        if end > blob_len:
            raise BundleError(f"{e['name']}: needs bytes up to {end}, blob has {blob_len}")
        spans.append((offset, end, e["name"]))
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise BundleError(f"tensors {n0} and {n1} overlap in the blob")
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise BundleError("duplicate tensor names in manifest")


def _manifest_path(path):
    path = Path(path)
    return path if path.suffix == ".json" else path.parent / (path.name + ".json")


def load_bundle(path, expected=None):
    """Load tensors from a bundle; ``expected`` restricts the allowed names."""
    mpath = _manifest_path(path)
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"unknown bundle format {manifest.get('format')!r}")
    blob = (mpath.parent / manifest["blob"]).read_bytes()
    entries = manifest["tensors"]
    _validate_entries(entries, len(blob))
    tensors = {}
    for e in entries:
        if expected is not None and e["name"] not in expected:
            raise BundleError(f"unknown tensor name {e['name']!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["length"], offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return tensors, manifest.get("meta", {})


def save_weights(path, model, extra=None):
    meta = {"layers": [[type(layer).__name__, vars(layer)] for layer in model.layers], "input_shape": list(model.input_shape)}
    meta.update(extra or {})
    return save_bundle(path, model.weights, meta)


def load_weights(path, layers=None, policy=None):
    """Rebuild a ModelSpec from a bundle (layer list taken from the manifest if not given)."""
    from .nn.backends import EXACT_POLICY
    from .nn.layers import LAYER_TYPES
    from .nn.model import ModelSpec

    tensors, meta = load_bundle(path)
    if layers is None:
        try:
            layers = tuple(LAYER_TYPES[name](**params) for name, params in meta["layers"])
        except (KeyError, TypeError) as exc:
            raise BundleError(f"manifest has no usable layer description: {exc}") from None
    expected = {f"{i}.{n}" for i, layer in enumerate(layers) if layer.has_weights for n in ("weight", "bias")}
    unknown = set(tensors) - expected
    if unknown:
        raise BundleError(f"unknown tensor names {sorted(unknown)}")
    return ModelSpec(layers, tensors, policy or EXACT_POLICY, tuple(meta.get("input_shape", (1, 28, 28))))
