"""Versioned binary checkpoint container for model parameters.

Layout (little-endian):
    0   magic "DP2U"
    4   u32 format version
    8   u32 header length
    12  u32 CRC-32 of the header bytes
    16  header JSON (canonical: sorted keys, no spaces)
    ... named tensor payload, row-major float32, in header order

The header carries the model config, stage metadata and a CRC of the tensor
payload, so any single corrupted byte is detected on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .budget import PrivacyBudget
from .errors import CheckpointFormatError
from .lm import ModelConfig, Params

MAGIC = b"DP2U"
FORMAT_VERSION = 1


class Stage(Enum):
    BASE_DP = "BaseDP"
    FULL_DATA = "FullData"
    UNLEARNED = "Unlearned"
    RFSR = "RFSR"
    BASELINE = "Baseline"


def data_fingerprint(pair_ids: Iterable[int]) -> int:
    """64-bit hash of the training-pair id set (sorted, deduplicated)."""
    h = hashlib.sha256()
    for i in sorted(set(int(x) for x in pair_ids)):
        h.update(i.to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest()[:8], "little")


@dataclass
class CheckpointMeta:
    stage: Stage
    epochs_trained: int
    seed: int
    data_fingerprint: int
    privacy: PrivacyBudget | None = None
    method: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value,
            "epochs_trained": self.epochs_trained,
            "seed": self.seed,
            "data_fingerprint": self.data_fingerprint,
            "privacy": self.privacy.to_dict() if self.privacy else None,
            "method": self.method,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CheckpointMeta":
        privacy = doc.get("privacy")
        return cls(
            stage=Stage(doc["stage"]),
            epochs_trained=doc["epochs_trained"],
            seed=doc["seed"],
            data_fingerprint=doc["data_fingerprint"],
            privacy=PrivacyBudget.from_dict(privacy) if privacy else None,
            method=doc.get("method"),
            extra=doc.get("extra", {}),
        )


_TENSOR_ORDER = ("emb", "w1", "b1", "w2", "b2")


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    k, d, h, v = config.context_k, config.embed_dim, config.hidden_dim, config.vocab_size
    return {"emb": (v, d), "w1": (k * d, h), "b1": (h,), "w2": (h, v), "b2": (v,)}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    metadata: CheckpointMeta

    def params(self) -> Params:
        return Params(*(self.tensors[n].astype(np.float64) for n in _TENSOR_ORDER))

    @classmethod
    def from_params(cls, config: ModelConfig, params: Params,
                    metadata: CheckpointMeta) -> "Checkpoint":
        tensors = {n: np.ascontiguousarray(a, dtype=np.float32)
                   for n, a in zip(_TENSOR_ORDER, params.arrays())}
        return cls(config=config, tensors=tensors, metadata=metadata)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    shapes = _expected_shapes(ckpt.config)
    payload = bytearray()
    tensor_entries = []
    for name in _TENSOR_ORDER:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        if arr.shape != shapes[name]:
            raise CheckpointFormatError(
                f"tensor {name} has shape {arr.shape}, config requires {shapes[name]}")
        tensor_entries.append({"name": name, "shape": list(arr.shape)})
        payload.extend(arr.tobytes())
    header = {
        "config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata.to_dict(),
        "tensors": tensor_entries,
        "payload_crc32": zlib.crc32(bytes(payload)),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob.extend(MAGIC)
    blob.extend(struct.pack("<I", FORMAT_VERSION))
    blob.extend(struct.pack("<I", len(header_bytes)))
    blob.extend(struct.pack("<I", zlib.crc32(header_bytes)))
    blob.extend(header_bytes)
    blob.extend(payload)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CheckpointFormatError("file too short for checkpoint header", offset=len(data))
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic, not a checkpoint file", offset=0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}", offset=4)
    (header_len,) = struct.unpack_from("<I", data, 8)
    (header_crc,) = struct.unpack_from("<I", data, 12)
    if 16 + header_len > len(data):
        raise CheckpointFormatError("truncated header", offset=len(data))
    header_bytes = data[16:16 + header_len]
    if zlib.crc32(header_bytes) != header_crc:
        raise CheckpointFormatError("header checksum mismatch", offset=16)
    try:
        header = json.loads(header_bytes)
        config = ModelConfig.from_dict(header["config"])
        metadata = CheckpointMeta.from_dict(header["metadata"])
        tensor_entries = header["tensors"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed header: {exc}", offset=16) from exc

    shapes = _expected_shapes(config)
    tensors: dict[str, np.ndarray] = {}
    offset = 16 + header_len
    for entry in tensor_entries:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in shapes:
            raise CheckpointFormatError(f"unexpected tensor {name!r}", offset=offset)
        if shape != shapes[name]:
            raise CheckpointFormatError(
                f"tensor {name} has shape {shape}, config requires {shapes[name]}",
                offset=offset)
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(data):
            raise CheckpointFormatError(f"truncated tensor {name}", offset=len(data))
        tensors[name] = np.frombuffer(
            data, dtype="<f4", count=int(np.prod(shape)), offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if set(tensors) != set(_TENSOR_ORDER):
        raise CheckpointFormatError(
            f"missing tensors {sorted(set(_TENSOR_ORDER) - set(tensors))}", offset=offset)
    if offset != len(data):
        raise CheckpointFormatError("trailing bytes after tensor payload", offset=offset)
    payload = data[16 + header_len:]
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointFormatError("tensor payload checksum mismatch",
                                    offset=16 + header_len)
    return Checkpoint(config=config, tensors=tensors, metadata=metadata)
