"""Unweighted probability averaging across per-feature models."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .audio_io import AudioClip, fix_duration, DEFAULT_TARGET_SECONDS
from .errors import EmptyEnsemble, FeatureKindMismatch, LengthMismatch
from .features import FEATURE_ORDER, DspConfig, FeatureKind, extract, normalize_map
from .nn.checkpoint import ModelCheckpoint, load_checkpoint


def average_probabilities(ps: Sequence) -> np.ndarray:
    """Element-wise mean of class-probability vectors.

    The vectors are summed in a canonical (lexicographic) order, so the result
    is bitwise identical for any permutation of ``ps``.
    """
    if len(ps) == 0:
        raise EmptyEnsemble("cannot average zero probability vectors")
    rows = [np.asarray(p, dtype=np.float64).ravel() for p in ps]
    if len({r.size for r in rows}) != 1:
        raise LengthMismatch(f"probability vectors differ in length: {[r.size for r in rows]}")
    stack = np.stack(rows)
    order = np.lexsort(stack.T[::-1])
    total = np.zeros(stack.shape[1])
    for i in order:
        total = total + stack[i]
    # rounding in the sum must not push the mean outside the members' range
    return np.clip(total / len(rows), stack.min(axis=0), stack.max(axis=0))


def predict_label(p) -> int:
    """Index of the largest probability; ties go to the lowest index."""
    return int(np.argmax(np.asarray(p)))


def config_label(kinds: Sequence[FeatureKind], model: str = "CNN") -> str:
    names = [FeatureKind.parse(k).value for k in kinds]
    if len(names) == 1:
        inner = names[0]
    elif len(names) == 2:
        inner = f"{names[0]} and {names[1]}"
    else:
        inner = ", ".join(names)
    return f"{model} ({inner})"


def canonical_kinds(kinds) -> tuple:
    kinds = {FeatureKind.parse(k) for k in kinds}
    return tuple(k for k in FEATURE_ORDER if k in kinds)


@dataclass
class EnsembleMember:
    checkpoint: str
    kind: FeatureKind

    def __post_init__(self):
        self.kind = FeatureKind.parse(self.kind)


@dataclass
class EnsembleSpec:
    members: list
    combination: str = "mean"

    def __post_init__(self):
        if not self.members:
            raise EmptyEnsemble("an ensemble needs at least one member")
        if self.combination != "mean":
            raise ValueError("only unweighted mean combination is supported")
        self.members = sorted(self.members, key=lambda m: (FEATURE_ORDER.index(m.kind), str(m.checkpoint)))
        self._loaded: Optional[list] = None

    def to_json(self) -> str:
        return json.dumps({"combination": self.combination,
                           "members": [{"checkpoint": str(m.checkpoint), "feature": m.kind.value}
                                       for m in self.members]}, indent=2)

    @classmethod
    def from_json(cls, text: str, base_dir=None) -> "EnsembleSpec":
        d = json.loads(text)
        members = []
        for m in d["members"]:
            path = Path(m["checkpoint"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            members.append(EnsembleMember(str(path), m["feature"]))
        return cls(members, d.get("combination", "mean"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "EnsembleSpec":
        path = Path(path)
        return cls.from_json(path.read_text(), base_dir=path.parent)

    def networks(self) -> list:
        """Load every member once; checks the stored feature kind against the declared one."""
        if self._loaded is None:
            loaded = []
            for m in self.members:
                ckpt = m.checkpoint if isinstance(m.checkpoint, ModelCheckpoint) else load_checkpoint(m.checkpoint)
                if ckpt.feature_kind is not None and ckpt.feature_kind != m.kind:
                    raise FeatureKindMismatch(
                        f"{m.checkpoint} was trained on {ckpt.feature_kind.value}, declared {m.kind.value}")
                loaded.append((m.kind, ckpt.network()))
            self._loaded = loaded
        return self._loaded


@dataclass
class EnsemblePrediction:
    label: int
    probs: np.ndarray
    member_probs: list = field(default_factory=list)
    extract_ms: float = 0.0
    infer_ms: float = 0.0


def ensemble_predict(spec: EnsembleSpec, clip: AudioClip, dsp: DspConfig = DspConfig(),
                     target_seconds: float = DEFAULT_TARGET_SECONDS) -> EnsemblePrediction:
    """Extract each member's feature from ``clip``, run the models, average and argmax."""
    nets = spec.networks()
    clip = fix_duration(clip, target_seconds)

    t0 = time.perf_counter()
    maps = {}
    for kind, _ in nets:
        if kind not in maps:
            maps[kind] = normalize_map(extract(clip, kind, dsp)).astype(np.float32)
    t1 = time.perf_counter()
    member_probs = [net.forward(maps[kind])[0] for kind, net in nets]
    probs = average_probabilities(member_probs)
    label = predict_label(probs)
    t2 = time.perf_counter()
    return EnsemblePrediction(label, probs, member_probs, (t1 - t0) * 1e3, (t2 - t1) * 1e3)
