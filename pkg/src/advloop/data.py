"""Datasets: IDX loading, synthetic blobs and the versioned on-disk registry.

Registry layout::

    <root>/datasets/<name>/<version>/data.bin
    <root>/datasets/<name>/<version>/meta.json

``data.bin`` is a little-endian container: magic ``b"ADVD"``, u16 format
version, u32 N, u32 H, u32 W, u8 provenance, N label bytes, then N*H*W
float32 pixels. Pixels are held as float32 everywhere in this module so that
put/get round-trips are exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (ConflictError, ConsistencyError, CorruptionError, FormatError,
                     NotFoundError, ValidationError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CONTAINER_MAGIC = b"ADVD"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHIIIB")

HEIGHT = WIDTH = 28


class Provenance(str, Enum):
    CLEAN = "Clean"
    ADVERSARIAL = "Adversarial"


_PROVENANCE_CODES = {Provenance.CLEAN: 0, Provenance.ADVERSARIAL: 1}


@dataclass(eq=False)
class LabeledDataset:
    images: np.ndarray  # N x 1 x 28 x 28, float32 in [0, 1]
    labels: np.ndarray  # N ints in [0, 9]
    name: str = "dataset"
    version: str = "1"
    provenance: Provenance = Provenance.CLEAN

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.ndim == 2 and images.shape[1] == HEIGHT * WIDTH:
            images = images.reshape(-1, 1, HEIGHT, WIDTH)
        if images.ndim != 4 or images.shape[1:] != (1, HEIGHT, WIDTH):
            raise ValidationError(f"images must have shape (N, 1, 28, 28), got {images.shape}")
        images = np.ascontiguousarray(images, dtype=np.float32)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise ValidationError(
                f"{images.shape[0]} images but labels have shape {labels.shape}")
        if images.shape[0] < 1:
            raise ValidationError("a dataset needs at least one sample")
        if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        if labels.min() < 0 or labels.max() > 9 or not np.all(labels == np.round(labels)):
            raise ValidationError("labels must be integers in [0, 9]")
        self.images = images
        self.labels = labels.astype(np.int64)
        self.provenance = Provenance(self.provenance)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def ref(self) -> str:
        return f"{self.name}:{self.version}"

    def subset(self, indices, name: str | None = None, version: str | None = None):
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx], self.labels[idx], name or self.name,
                              version or self.version, self.provenance)

    def equals(self, other: "LabeledDataset") -> bool:
        """Bit-level equality of pixels, labels and metadata."""
        return (self.name == other.name and self.version == other.version
                and self.provenance == other.provenance
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels))


def parse_ref(ref: str) -> tuple[str, str]:
    """Split ``"name:version"``."""
    name, sep, version = ref.rpartition(":")
    if not sep or not name or not version:
        raise ValidationError(f"dataset reference must look like name:version, got {ref!r}")
    return name, version


def quantize_toward(point: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """Round float64 ``point`` to float32, never moving it farther from ``origin``.

    ``origin`` must already be float32-representable. Values that float32
    rounding pushes away from ``origin`` are stepped back by one ulp, so any
    L-inf bound and [0, 1] range that ``point`` satisfied is preserved.
    """
    point = np.asarray(point, dtype=np.float64)
    origin32 = np.asarray(origin, dtype=np.float32)
    rounded = point.astype(np.float32)
    overshoot = (np.abs(rounded.astype(np.float64) - origin32)
                 > np.abs(point - origin32.astype(np.float64)))
    return np.where(overshoot, np.nextafter(rounded, origin32), rounded)


# -- IDX ------------------------------------------------------------------


def _read_idx(path, expected_magic: int, kind: str):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad IDX {kind} magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = [count]
    offset = 8
    ndim = expected_magic & 0xFF
    for _ in range(ndim - 1):
        if len(raw) < offset + 4:
            raise FormatError(f"{path}: truncated IDX header")
        dims.append(struct.unpack(">I", raw[offset:offset + 4])[0])
        offset += 4
    expected = int(np.prod(dims))
    body = raw[offset:]
    if len(body) < expected:
        raise FormatError(f"{path}: truncated IDX body ({len(body)} of {expected} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist", version: str = "1") -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}")
    if images.shape[1:] != (HEIGHT, WIDTH):
        raise FormatError(f"expected 28x28 images, got {images.shape[1:]}")
    pixels = images.astype(np.float32) / np.float32(255.0)
    return LabeledDataset(pixels[:, None], labels, name, version, Provenance.CLEAN)


def write_idx(images_u8, labels, images_path, labels_path) -> None:
    """Write uint8 images (N x 28 x 28) and labels in IDX format."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
                                  + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + labels.tobytes())


def export_bundled_mnist_subset(out_dir, n_test: int = 1000, seed: int = 0) -> dict[str, Path]:
    """Write the 5000-digit MNIST sample shipped with ``mlxtend`` as IDX files.

    The sample is split per class into train/test parts (``n_test`` test
    digits in total). Returns the four written paths keyed
    ``train_images``, ``train_labels``, ``test_images``, ``test_labels``.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise ValidationError("the bundled MNIST sample needs mlxtend "
                              "(pip install 'artifact[desk]')") from exc

    x, y = mnist_data()
    x = x.astype(np.uint8).reshape(-1, HEIGHT, WIDTH)
    rng = np.random.default_rng(seed)
    per_class = n_test // 10
    test_idx, train_idx = [], []
    for k in range(10):
        idx = rng.permutation(np.flatnonzero(y == k))
        test_idx.append(idx[:per_class])
        train_idx.append(idx[per_class:])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, parts in (("train", train_idx), ("test", test_idx)):
        idx = rng.permutation(np.concatenate(parts))
        paths[f"{split}_images"] = out / f"{split}-images-idx3-ubyte"
        paths[f"{split}_labels"] = out / f"{split}-labels-idx1-ubyte"
        write_idx(x[idx], y[idx], paths[f"{split}_images"], paths[f"{split}_labels"])
    return paths


# -- synthetic ------------------------------------------------------------


def synthetic_templates(n_classes: int, seed: int) -> np.ndarray:
    """Per-class template images, uniform in [0.2, 0.8]."""
    rng = np.random.default_rng([seed, 0x5EED])
    return rng.uniform(0.2, 0.8, size=(n_classes, 1, HEIGHT, WIDTH))


def make_synthetic(n_per_class: int, n_classes: int = 10, seed: int = 0,
                   noise_std: float = 0.2, name: str = "synthetic",
                   version: str = "1") -> LabeledDataset:
    """Gaussian blobs around distinct template images, clipped to [0, 1]."""
    if n_per_class < 1:
        raise ValidationError(f"n_per_class must be >= 1, got {n_per_class}")
    if not 2 <= n_classes <= 10:
        raise ValidationError(f"n_classes must be in [2, 10], got {n_classes}")
    templates = synthetic_templates(n_classes, seed)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(n_classes), n_per_class))
    noise = rng.normal(0.0, noise_std, size=(labels.size, 1, HEIGHT, WIDTH))
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    return LabeledDataset(images, labels, name, version, Provenance.CLEAN)


# -- container ------------------------------------------------------------


def encode_dataset(dataset: LabeledDataset) -> bytes:
    n = len(dataset)
    header = _HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, n, HEIGHT, WIDTH,
                          _PROVENANCE_CODES[dataset.provenance])
    return (header + dataset.labels.astype(np.uint8).tobytes()
            + dataset.images.astype("<f4").tobytes())


def decode_dataset(blob: bytes, name: str, version: str) -> LabeledDataset:
    if len(blob) < _HEADER.size:
        raise FormatError("dataset container shorter than its header")
    magic, fmt, n, h, w, prov = _HEADER.unpack_from(blob)
    if magic != CONTAINER_MAGIC:
        raise FormatError(f"bad dataset container magic {magic!r}")
    if fmt != CONTAINER_VERSION:
        raise FormatError(f"unsupported dataset container version {fmt}")
    if (h, w) != (HEIGHT, WIDTH):
        raise FormatError(f"unsupported image size {h}x{w}")
    codes = {v: k for k, v in _PROVENANCE_CODES.items()}
    if prov not in codes:
        raise FormatError(f"unknown provenance code {prov}")
    expected = _HEADER.size + n + 4 * n * h * w
    if len(blob) != expected:
        raise FormatError(f"dataset container has {len(blob)} bytes, expected {expected}")
    off = _HEADER.size
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off)
    pixels = np.frombuffer(blob, dtype="<f4", count=n * h * w, offset=off + n)
    return LabeledDataset(pixels.astype(np.float32).reshape(n, 1, h, w), labels.copy(),
                          name, version, codes[prov])


# -- registry -------------------------------------------------------------


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    version: str
    path: Path
    provenance: Provenance
    checksum: str
    created_at: str


def _check_key(part: str, what: str) -> None:
    if not part or part.startswith(".") or "/" in part or "\\" in part or ":" in part:
        raise ValidationError(f"invalid dataset {what} {part!r}")


def sha256_hex(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _entry_dir(root, name: str, version: str) -> Path:
    return Path(root) / "datasets" / name / version


def registry_put(root, dataset: LabeledDataset) -> RegistryEntry:
    """Publish ``dataset`` under ``(name, version)``; the key must be new."""
    _check_key(dataset.name, "name")
    _check_key(dataset.version, "version")
    final = _entry_dir(root, dataset.name, dataset.version)
    if final.exists():
        raise ConflictError(f"dataset {dataset.ref} already exists")
    final.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_dataset(dataset)
    meta = {
        "name": dataset.name,
        "version": dataset.version,
        "provenance": dataset.provenance.value,
        "checksum": sha256_hex(blob),
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=final.parent))
    try:
        (tmp / "data.bin").write_bytes(blob)
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        try:
            os.rename(tmp, final)
        except OSError as exc:
            raise ConflictError(f"dataset {dataset.ref} already exists") from exc
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return _entry_from_meta(final, meta)


def _entry_from_meta(path: Path, meta: dict) -> RegistryEntry:
    return RegistryEntry(meta["name"], meta["version"], path / "data.bin",
                         Provenance(meta["provenance"]), meta["checksum"], meta["created_at"])


def _read_meta(path: Path) -> dict:
    try:
        return json.loads((path / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable registry metadata in {path}") from exc


def registry_get(root, name: str, version: str) -> LabeledDataset:
    path = _entry_dir(root, name, version)
    if not (path / "meta.json").exists():
        raise NotFoundError(f"dataset {name}:{version} not found in registry {root}")
    meta = _read_meta(path)
    blob = (path / "data.bin").read_bytes()
    if sha256_hex(blob) != meta["checksum"]:
        raise CorruptionError(f"checksum mismatch for dataset {name}:{version}")
    return decode_dataset(blob, name, version)


def registry_get_ref(root, ref: str) -> LabeledDataset:
    return registry_get(root, *parse_ref(ref))


def registry_list(root) -> list[RegistryEntry]:
    base = Path(root) / "datasets"
    entries = []
    if not base.is_dir():
        return entries
    for name_dir in base.iterdir():
        if not name_dir.is_dir() or name_dir.name.startswith("."):
            continue
        for version_dir in name_dir.iterdir():
            if version_dir.name.startswith(".") or not (version_dir / "meta.json").exists():
                continue
            entries.append(_entry_from_meta(version_dir, _read_meta(version_dir)))
    return sorted(entries, key=lambda e: (e.name, e.version))
