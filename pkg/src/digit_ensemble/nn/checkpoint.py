"""Checkpoint persistence.

File layout (all integers little-endian)::

    b"DECK"            magic
    u32                format version
    u32 + bytes        JSON header (model spec, feature kind, train config, history, metadata)
    u32                number of tensors
    per tensor:        u16 name length, name (utf-8), u8 ndim, u32 * ndim dims, float32 data
    u64                BLAKE2b-64 checksum of everything before it
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import CorruptCheckpoint
from ..features import FeatureKind
from .model import ModelSpec, Network
from .train import TrainConfig, TrainHistory

MAGIC = b"DECK"
VERSION = 1


@dataclass
class ModelCheckpoint:
    spec: ModelSpec
    weights: dict
    feature_kind: Optional[FeatureKind]
    train_config: TrainConfig
    history: TrainHistory = field(default_factory=TrainHistory)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.feature_kind is not None:
            self.feature_kind = FeatureKind.parse(self.feature_kind)

    def network(self, dtype=np.float32) -> Network:
        net = Network(self.spec, seed=self.train_config.seed, dtype=dtype)
        net.load_state_dict(self.weights)
        return net


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    header = {
        "spec": ckpt.spec.to_dict(),
        "feature_kind": ckpt.feature_kind.value if ckpt.feature_kind else None,
        "train_config": ckpt.train_config.to_dict(),
        "history": ckpt.history.to_dict(),
        "metadata": ckpt.metadata,
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(ckpt.weights))]
    for name in sorted(ckpt.weights):
        arr = np.asarray(ckpt.weights[name])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes(order="C"))
    body = b"".join(parts)
    return body + _checksum(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> ModelCheckpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic")
    body, check = data[:-8], data[-8:]
    if _checksum(body) != check:
        raise CorruptCheckpoint("checksum mismatch (truncated or modified file)")
    r = _Reader(body)
    r.take(4)
    version, text_len = r.unpack("<II")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(text_len).decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        cfg = TrainConfig(**header["train_config"])
        history = TrainHistory.from_dict(header["history"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc

    (count,) = r.unpack("<I")
    weights = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        weights[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(body):
        raise CorruptCheckpoint("trailing bytes after tensor table")

    ckpt = ModelCheckpoint(spec, weights, header["feature_kind"], cfg, history, header.get("metadata", {}))
    try:
        ckpt.network()
    except ValueError as exc:
        raise CorruptCheckpoint(f"weights do not fit the model spec: {exc}") from exc
    return ckpt


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> ModelCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())
