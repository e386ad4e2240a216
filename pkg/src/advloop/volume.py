"""File-backed model volume.

Layout::

    <root>/volume/models/<model_id>/params.bin
    <root>/volume/models/<model_id>/meta.json

``params.bin`` (little-endian): magic ``b"ADVM"``, u16 format version, u8
architecture code, u32 layer count, then for every layer: u8 kind code, u8
weight ndim, weight dims (u32 each), u8 bias ndim, bias dims (u32 each),
followed by the weight and bias values as float64.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import numpy as np

from .data import sha256_hex
from .errors import ConflictError, CorruptionError, FormatError, NotFoundError, ValidationError
from .nn import Architecture, Layer, Model

PARAMS_MAGIC = b"ADVM"
PARAMS_VERSION = 1

_ARCH_CODES = {Architecture.SMALL_CNN: 0, Architecture.MLP: 1}
_KIND_CODES = {"conv": 0, "dense": 1}


class Role(str, Enum):
    BASELINE = "Baseline"
    HARDENED = "Hardened"


@dataclass
class ModelRecord:
    role: Role
    model: Model
    baseline_accuracy: float
    train_config: dict = field(default_factory=dict)
    defense_config: dict | None = None
    parent_model_id: str | None = None
    model_id: str = ""
    checksum: str = ""
    created_at: str = ""

    @property
    def architecture(self) -> Architecture:
        return self.model.architecture


def encode_params(model: Model) -> bytes:
    parts = [struct.pack("<4sHBI", PARAMS_MAGIC, PARAMS_VERSION,
                         _ARCH_CODES[model.architecture], len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<BB", _KIND_CODES[layer.kind], layer.weight.ndim))
        parts.append(struct.pack(f"<{layer.weight.ndim}I", *layer.weight.shape))
        parts.append(struct.pack("<B", layer.bias.ndim))
        parts.append(struct.pack(f"<{layer.bias.ndim}I", *layer.bias.shape))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise FormatError("params.bin is truncated")
        out = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return out

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        if self.pos + 8 * count > len(self.blob):
            raise FormatError("params.bin is truncated")
        arr = np.frombuffer(self.blob, dtype="<f8", count=count, offset=self.pos)
        self.pos += 8 * count
        return arr.astype(np.float64).reshape(shape)


def decode_params(blob: bytes) -> Model:
    r = _Reader(blob)
    magic, version, arch_code, n_layers = r.take("<4sHBI")
    if magic != PARAMS_MAGIC:
        raise FormatError(f"bad params magic {magic!r}")
    if version != PARAMS_VERSION:
        raise FormatError(f"unsupported params version {version}")
    archs = {v: k for k, v in _ARCH_CODES.items()}
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if arch_code not in archs:
        raise FormatError(f"unknown architecture code {arch_code}")
    layers = []
    for _ in range(n_layers):
        kind_code, wdim = r.take("<BB")
        if kind_code not in kinds:
            raise FormatError(f"unknown layer kind code {kind_code}")
        wshape = r.take(f"<{wdim}I")
        (bdim,) = r.take("<B")
        bshape = r.take(f"<{bdim}I")
        layers.append(Layer(kinds[kind_code], r.array(wshape), r.array(bshape)))
    if r.pos != len(blob):
        raise FormatError("trailing bytes after the last layer in params.bin")
    return Model(archs[arch_code], layers)


def _models_dir(root) -> Path:
    return Path(root) / "volume" / "models"


def default_model_id(role: Role, checksum: str) -> str:
    return f"{role.value.lower()}-{checksum[:12]}"


def _meta(record: ModelRecord) -> dict:
    return {
        "model_id": record.model_id,
        "role": record.role.value,
        "architecture": record.architecture.value,
        "baseline_accuracy": record.baseline_accuracy,
        "train_config": record.train_config,
        "defense_config": record.defense_config,
        "parent_model_id": record.parent_model_id,
        "checksum": record.checksum,
        "created_at": record.created_at,
    }


def volume_store(root, record: ModelRecord) -> str:
    """Persist ``record`` atomically and return its model id.

    The id, checksum and timestamp are filled in when left empty.
    """
    record.role = Role(record.role)
    blob = encode_params(record.model)
    record.checksum = sha256_hex(blob)
    if not record.model_id:
        record.model_id = default_model_id(record.role, record.checksum)
    if "/" in record.model_id or record.model_id.startswith("."):
        raise ValidationError(f"invalid model id {record.model_id!r}")
    if record.role is Role.HARDENED:
        if not record.parent_model_id:
            raise ValidationError("a Hardened record needs a parent_model_id")
        parent = volume_meta(root, record.parent_model_id)
        if parent["role"] != Role.BASELINE.value:
            raise ValidationError(f"parent {record.parent_model_id} is not a Baseline record")
    if not record.created_at:
        record.created_at = datetime.now(timezone.utc).isoformat()
    base = _models_dir(root)
    final = base / record.model_id
    if final.exists():
        raise ConflictError(f"model {record.model_id} already exists")
    base.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=base))
    try:
        (tmp / "params.bin").write_bytes(blob)
        (tmp / "meta.json").write_text(json.dumps(_meta(record), indent=2, sort_keys=True))
        try:
            os.rename(tmp, final)
        except OSError as exc:
            raise ConflictError(f"model {record.model_id} already exists") from exc
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return record.model_id


def volume_meta(root, model_id: str) -> dict:
    path = _models_dir(root) / model_id / "meta.json"
    if not path.exists():
        raise NotFoundError(f"model {model_id} not found in volume {root}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"unreadable metadata for model {model_id}") from exc


def volume_load(root, model_id: str) -> ModelRecord:
    meta = volume_meta(root, model_id)
    blob = (_models_dir(root) / model_id / "params.bin").read_bytes()
    if sha256_hex(blob) != meta["checksum"]:
        raise CorruptionError(f"checksum mismatch for model {model_id}")
    return ModelRecord(
        role=Role(meta["role"]),
        model=decode_params(blob),
        baseline_accuracy=meta["baseline_accuracy"],
        train_config=meta["train_config"],
        defense_config=meta["defense_config"],
        parent_model_id=meta["parent_model_id"],
        model_id=meta["model_id"],
        checksum=meta["checksum"],
        created_at=meta["created_at"],
    )


def volume_list(root) -> list[dict]:
    base = _models_dir(root)
    if not base.is_dir():
        return []
    metas = [volume_meta(root, p.name) for p in base.iterdir()
             if p.is_dir() and not p.name.startswith(".")]
    return sorted(metas, key=lambda m: m["model_id"])


def params_path(root, model_id: str) -> Path:
    return _models_dir(root) / model_id / "params.bin"
