"""Binary checkpoint files.

Layout::

    b"MQAS" | u32 version | u64 header length | header (UTF-8 JSON) | tensor bytes

The header carries the model config, vocabulary, training metadata and a
tensor directory (name, shape, offset, byte length, SHA-256).  Tensor bytes
are little-endian float64 in row-major order.  JSON is written with sorted
keys and fixed separators so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Vocabulary
from .model import ModelConfig, Seq2SeqModel

MAGIC = b"MQAS"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointFormatError(ValueError):
    pass


class CheckpointIntegrityError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    frozen: list[str] = field(default_factory=list)
    version: int = VERSION

    @classmethod
    def from_model(cls, model: Seq2SeqModel, vocab: Vocabulary, metadata: dict | None = None) -> "Checkpoint":
        return cls(
            config=ModelConfig(**model.config.to_dict()),
            vocab=vocab,
            tensors={n: p.value.data.copy() for n, p in model.params.items()},
            metadata=dict(metadata or {}),
            frozen=[n for n, p in model.params.items() if not p.trainable],
        )

    def build_model(self) -> Seq2SeqModel:
        model = Seq2SeqModel(ModelConfig(**self.config.to_dict()))
        if set(model.params) != set(self.tensors):
            missing = set(model.params) ^ set(self.tensors)
            raise CheckpointFormatError(f"tensor set does not match the model: {sorted(missing)}")
        for name, p in model.params.items():
            arr = self.tensors[name]
            if arr.shape != p.value.shape:
                raise CheckpointFormatError(f"{name}: stored shape {arr.shape} != {p.value.shape}")
            p.value.data = arr.copy()
            if name in self.frozen:
                p.freeze()
        return model


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        raw = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8").tobytes()
        directory.append({
            "name": name,
            "shape": list(ckpt.tensors[name].shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    header = _dumps({
        "config": ckpt.config.to_dict(),
        "vocab": {"kind": ckpt.vocab.kind, "tokens": ckpt.vocab.to_records()},
        "metadata": ckpt.metadata,
        "frozen": sorted(ckpt.frozen),
        "tensors": directory,
        "data_length": offset,
    })
    return _PREFIX.pack(MAGIC, ckpt.version, len(header)) + header + b"".join(blobs)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointIntegrityError("file shorter than the checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise CheckpointIntegrityError("truncated header")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"corrupt header: {exc}") from None
    data = buf[start:]
    if len(data) != header["data_length"]:
        raise CheckpointIntegrityError(
            f"tensor region is {len(data)} bytes, header declares {header['data_length']}"
        )
    tensors = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointIntegrityError(f"checksum mismatch in tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    vocab = Vocabulary.from_records(header["vocab"]["tokens"], header["vocab"]["kind"])
    return Checkpoint(
        config=ModelConfig(**header["config"]),
        vocab=vocab,
        tensors=tensors,
        metadata=header["metadata"],
        frozen=list(header["frozen"]),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
