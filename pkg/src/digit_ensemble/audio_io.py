"""WAV decoding, fixed-length clips, dataset discovery and splitting."""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ClassTooSmall,
    EmptyDataset,
    MalformedContainer,
    UnlabeledFile,
    UnsupportedEncoding,
)

PCM_FORMAT = 1
DEFAULT_TARGET_SECONDS = 2.0


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: Optional[int] = None
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("clip needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)) or np.max(np.abs(samples)) > 1.0:
            raise ValueError("samples must be finite and within [-1, 1]")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.label is not None and not 0 <= self.label:
            raise ValueError(f"label must be a non-negative class index, got {self.label}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def _iter_chunks(data: bytes, offset: int):
    while offset + 8 <= len(data):
        cid = data[offset:offset + 4]
        (size,) = struct.unpack_from("<I", data, offset + 4)
        body = offset + 8
        yield cid, body, size
        offset = body + size + (size & 1)


def parse_wav(data: bytes, label: Optional[int] = None, source_id: str = "") -> AudioClip:
    """Decode an uncompressed PCM RIFF/WAVE byte string into a mono clip.

    8-bit (unsigned) and 16-bit (signed) PCM with one or two channels are
    accepted. Stereo is reduced by averaging the channels.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedContainer("missing RIFF/WAVE header")

    fmt = None
    payload = None
    for cid, body, size in _iter_chunks(data, 12):
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise MalformedContainer("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", data, body)
        elif cid == b"data":
            end = body + size
            if end > len(data):
                raise MalformedContainer(
                    f"data chunk declares {size} bytes but only {len(data) - body} remain")
            payload = data[body:end]
        if fmt is not None and payload is not None:
            break

    if fmt is None:
        raise MalformedContainer("no fmt chunk")
    if payload is None:
        raise MalformedContainer("no data chunk")

    format_code, channels, rate, _byte_rate, block_align, bits = fmt
    if format_code != PCM_FORMAT:
        raise UnsupportedEncoding(f"format code {format_code} is not integer PCM")
    if bits not in (8, 16):
        raise UnsupportedEncoding(f"{bits}-bit PCM is not supported")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels are not supported")
    if rate == 0:
        raise MalformedContainer("sample rate is zero")

    frame_bytes = channels * bits // 8
    n_frames = len(payload) // frame_bytes
    if n_frames == 0:
        raise MalformedContainer("data chunk holds no complete sample frame")
    payload = payload[:n_frames * frame_bytes]

    if bits == 8:
        ints = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) - 128.0
    else:
        ints = np.frombuffer(payload, dtype="<i2").astype(np.float64)
    samples = ints / float(1 << (bits - 1))
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples, rate, label=label, source_id=source_id)


def encode_wav(samples: Sequence[float], sample_rate: int, bits: int = 16, channels: int = 1) -> bytes:
    """Encode amplitudes in [-1, 1] as PCM WAV bytes.

    With ``channels=2`` the input must be an (n, 2) array.
    """
    x = np.asarray(samples, dtype=np.float64)
    if channels == 2:
        x = x.reshape(-1, 2)
    scale = float(1 << (bits - 1))
    q = np.clip(np.round(x * scale), -scale, scale - 1)
    if bits == 8:
        raw = (q + 128).astype(np.uint8).tobytes()
    elif bits == 16:
        raw = q.astype("<i2").tobytes()
    else:
        raise UnsupportedEncoding(f"{bits}-bit PCM is not supported")
    block_align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", PCM_FORMAT, channels, sample_rate,
                      sample_rate * block_align, block_align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(raw)) + raw
    if len(raw) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def read_wav(path, label: Optional[int] = None) -> AudioClip:
    path = Path(path)
    return parse_wav(path.read_bytes(), label=label, source_id=str(path))


def write_wav(path, samples: Sequence[float], sample_rate: int, bits: int = 16) -> None:
    Path(path).write_bytes(encode_wav(samples, sample_rate, bits=bits))


def fix_duration(clip: AudioClip, target_seconds: float = DEFAULT_TARGET_SECONDS) -> AudioClip:
    """Truncate or zero-pad at the end to exactly round(target_seconds * rate) samples."""
    if not target_seconds > 0:
        raise ValueError(f"target_seconds must be positive, got {target_seconds}")
    n = int(round(target_seconds * clip.sample_rate))
    x = clip.samples
    if x.size == n:
        return clip
    if x.size > n:
        out = x[:n].copy()
    else:
        out = np.zeros(n, dtype=np.float64)
        out[:x.size] = x
    return AudioClip(out, clip.sample_rate, label=clip.label, source_id=clip.source_id)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class Layout(str, enum.Enum):
    FSDD = "fsdd"
    FOLDER_PER_CLASS = "folder"

    @classmethod
    def parse(cls, value) -> "Layout":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower().replace("-", "").replace("_", "")
        if v == "fsdd":
            return cls.FSDD
        if v in ("folder", "folderperclass"):
            return cls.FOLDER_PER_CLASS
        raise ValueError(f"unknown dataset layout {value!r}")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    speaker_id: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    class_count: int = 10
    root: str = ""

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        paths = set()
        for e in self.entries:
            if not 0 <= e.label < self.class_count:
                raise ValueError(f"label {e.label} outside [0, {self.class_count}) for {e.path}")
            if e.path in paths:
                raise ValueError(f"duplicate path {e.path}")
            paths.add(e.path)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(tuple(self.entries[i] for i in indices), self.class_count, self.root)


FSDD_NAME = re.compile(r"^(\d)_([^_]+)_(\d+)\.wav$", re.IGNORECASE)


def load_dataset(root, layout="fsdd", class_count: int = 10) -> DatasetManifest:
    """Index every ``.wav`` below ``root`` and attach labels.

    FSDD labels come from the ``<digit>_<speaker>_<index>.wav`` file name,
    FolderPerClass labels from the first directory below ``root``.
    """
    root = Path(root)
    layout = Layout.parse(layout)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    files = sorted((p for p in root.rglob("*") if p.is_file() and p.suffix.lower() == ".wav"),
                   key=lambda p: str(p))
    if not files:
        raise EmptyDataset(f"no .wav files under {root}")

    entries = []
    for p in files:
        if layout is Layout.FSDD:
            m = FSDD_NAME.match(p.name)
            if m is None:
                raise UnlabeledFile(f"{p.name} does not follow <digit>_<speaker>_<index>.wav")
            label, speaker = int(m.group(1)), m.group(2)
        else:
            rel = p.relative_to(root)
            if len(rel.parts) < 2 or not rel.parts[0].isdigit():
                raise UnlabeledFile(f"{p} is not inside a <class-index>/ directory")
            label, speaker = int(rel.parts[0]), None
        if label >= class_count:
            raise UnlabeledFile(f"{p} maps to class {label}, outside [0, {class_count})")
        entries.append(ManifestEntry(str(p), label, speaker))
    return DatasetManifest(tuple(entries), class_count, str(root))


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    val_fraction_of_train: float = 0.1
    seed: int = 0
    stratified: bool = False

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if not 0 < self.val_fraction_of_train < 1:
            raise ValueError(f"val_fraction_of_train must be in (0, 1), got {self.val_fraction_of_train}")


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportionally to ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    quota = total * weights / weights.sum()
    base = np.floor(quota).astype(np.int64)
    remainder = total - int(base.sum())
    # ties on the fractional part go to the lower class index
    order = sorted(range(len(quota)), key=lambda i: (-(quota[i] - base[i]), i))
    for i in order[:remainder]:
        base[i] += 1
    return base


def split_dataset(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()):
    """Partition a manifest into (train, val, test) manifests.

    ``|test| = round(test_fraction * N)`` and ``|val| = round(val_fraction * (N - |test|))``.
    The same seed always gives the same partition.
    """
    n = len(manifest)
    if n == 0:
        raise EmptyDataset("cannot split an empty manifest")
    n_test = int(round(spec.test_fraction * n))
    n_val = int(round(spec.val_fraction_of_train * (n - n_test)))
    rng = np.random.default_rng(spec.seed)

    if not spec.stratified:
        perm = rng.permutation(n)
        test_idx = perm[:n_test]
        val_idx = perm[n_test:n_test + n_val]
        train_idx = perm[n_test + n_val:]
    else:
        labels = manifest.labels
        classes = np.unique(labels)
        members = [np.flatnonzero(labels == c) for c in classes]
        sizes = np.array([len(m) for m in members])
        small = [int(c) for c, s in zip(classes, sizes) if s < 3]
        if small:
            raise ClassTooSmall(f"classes {small} have fewer than 3 items")
        test_counts = _apportion(n_test, sizes)
        val_counts = _apportion(n_val, sizes - test_counts)
        test_idx, val_idx, train_idx = [], [], []
        for idx, t, v in zip(members, test_counts, val_counts):
            idx = rng.permutation(idx)
            test_idx.extend(idx[:t])
            val_idx.extend(idx[t:t + v])
            train_idx.extend(idx[t + v:])

    def pick(idx):
        return manifest.subset(sorted(int(i) for i in idx))

    return pick(train_idx), pick(val_idx), pick(test_idx)
