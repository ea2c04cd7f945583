"""Mel spectrogram, MFCC and zero-crossing-rate feature maps.

Every extractor turns a fixed-length clip into a ``(32, 32, 1)`` float array,
the input shape of the CNN.
"""

from __future__ import annotations

import enum
import functools
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .audio_io import AudioClip
from .errors import (
    BadFrameLength,
    ConfigError,
    CorruptFeatureMap,
    DomainError,
    SignalTooShort,
)

MAP_SIZE = 32
MAP_SHAPE = (MAP_SIZE, MAP_SIZE, 1)


class FeatureKind(str, enum.Enum):
    MS = "MS"
    MFCC = "MFCC"
    ZCR = "ZCR"

    @classmethod
    def parse(cls, value) -> "FeatureKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValueError(f"unknown feature kind {value!r}; expected MS, MFCC or ZCR") from None


# canonical ordering used for tables and ensembles
FEATURE_ORDER = (FeatureKind.MS, FeatureKind.MFCC, FeatureKind.ZCR)


@dataclass(frozen=True)
class DspConfig:
    """Framing and filterbank settings.

    ``None`` fields are derived from the sample rate by :meth:`resolve`:
    25 ms frames (nearest even sample count), 10 ms hop, ``n_fft`` the next
    power of two, ``f_max`` the Nyquist frequency.
    """

    frame_len: Optional[int] = None
    hop_len: Optional[int] = None
    n_fft: Optional[int] = None
    n_mels: int = 40
    n_mfcc: int = 20
    f_min: float = 0.0
    f_max: Optional[float] = None
    window: str = "hann"
    log_floor: float = 1e-10

    def resolve(self, sample_rate: int) -> "DspConfig":
        frame_len = self.frame_len
        if frame_len is None:
            frame_len = 2 * int(round(0.025 * sample_rate / 2))
        hop_len = self.hop_len if self.hop_len is not None else int(round(0.010 * sample_rate))
        n_fft = self.n_fft if self.n_fft is not None else 1 << max(0, (frame_len - 1).bit_length())
        f_max = self.f_max if self.f_max is not None else sample_rate / 2
        cfg = replace(self, frame_len=frame_len, hop_len=hop_len, n_fft=n_fft, f_max=float(f_max))
        cfg.validate(sample_rate)
        return cfg

    def validate(self, sample_rate: Optional[int] = None) -> None:
        if self.frame_len is None or self.hop_len is None or self.n_fft is None:
            raise ConfigError("frame_len, hop_len and n_fft must be set (call resolve())")
        if not 0 < self.hop_len <= self.frame_len <= self.n_fft:
            raise ConfigError(
                f"need 0 < hop_len <= frame_len <= n_fft, got {self.hop_len}, {self.frame_len}, {self.n_fft}")
        if self.n_fft & (self.n_fft - 1):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.n_mels < 1 or not 1 <= self.n_mfcc <= self.n_mels:
            raise ConfigError(f"need 1 <= n_mfcc <= n_mels, got {self.n_mfcc}, {self.n_mels}")
        if self.window.lower() not in ("hann", "rectangular"):
            raise ConfigError(f"window must be 'hann' or 'rectangular', got {self.window!r}")
        if not self.log_floor > 0:
            raise ConfigError("log_floor must be positive")
        if sample_rate is not None:
            f_max = self.f_max if self.f_max is not None else sample_rate / 2
            if not 0 <= self.f_min < f_max <= sample_rate / 2:
                raise ConfigError(
                    f"need 0 <= f_min < f_max <= {sample_rate / 2}, got {self.f_min}, {f_max}")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# mel scale
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise DomainError("frequency must be non-negative")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise DomainError("mel value must be non-negative")
    f = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(f) if f.ndim == 0 else f


# ---------------------------------------------------------------------------
# framing and spectra
# ---------------------------------------------------------------------------

def frame_signal(samples, cfg: DspConfig) -> np.ndarray:
    """Slice into ``(n_frames, frame_len)``; a trailing partial frame is dropped."""
    x = np.asarray(samples, dtype=np.float64)
    frame_len, hop = cfg.frame_len, cfg.hop_len
    if x.size < frame_len:
        raise SignalTooShort(f"{x.size} samples is shorter than one frame ({frame_len})")
    n_frames = (x.size - frame_len) // hop + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]
    return np.ascontiguousarray(windows[:n_frames])


@functools.lru_cache(maxsize=32)
def _window(kind: str, n: int) -> np.ndarray:
    if kind.lower() == "rectangular":
        w = np.ones(n)
    else:
        # periodic Hann
        w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def fft(x) -> np.ndarray:
    """Radix-2 FFT of a 1-D sequence whose length is a power of two."""
    return _kernels.fft_rows(np.asarray(x)[None, :])[0]


def power_spectra(frames: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Windowed, zero-padded ``|X[k]|^2`` for ``k = 0..n_fft/2``, one row per frame."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] != cfg.frame_len:
        raise BadFrameLength(f"frame has {frames.shape[1]} samples, expected {cfg.frame_len}")
    padded = np.zeros((frames.shape[0], cfg.n_fft))
    padded[:, :cfg.frame_len] = frames * _window(cfg.window, cfg.frame_len)
    spec = _kernels.fft_rows(padded)[:, :cfg.n_fft // 2 + 1]
    return spec.real ** 2 + spec.imag ** 2


def power_spectrum(frame, cfg: DspConfig) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1:
        raise BadFrameLength("power_spectrum expects a single 1-D frame")
    return power_spectra(frame[None, :], cfg)[0]


# ---------------------------------------------------------------------------
# filterbank
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MelFilterbank:
    weights: np.ndarray      # (n_mels, n_fft // 2 + 1)
    band_edges: np.ndarray   # (n_mels + 2,) in Hz

    @property
    def centers(self) -> np.ndarray:
        return self.band_edges[1:-1]


@functools.lru_cache(maxsize=64)
def _filterbank(sample_rate: int, n_fft: int, n_mels: int, f_min: float, f_max: float) -> MelFilterbank:
    mels = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    edges = mel_to_hz(mels)
    edges[0], edges[-1] = f_min, f_max
    if np.any(np.diff(edges) <= 0):
        raise ConfigError("mel band edges are not strictly increasing")

    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, peak, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (peak - lo)
    falling = (hi - freqs) / (hi - peak)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"mel bands {empty.tolist()} contain no FFT bin; lower n_mels or raise n_fft")
    weights.setflags(write=False)
    edges.setflags(write=False)
    return MelFilterbank(weights, edges)


def build_mel_filterbank(sample_rate: int, cfg: DspConfig) -> MelFilterbank:
    """Triangular filters with edges equally spaced in mel between f_min and f_max.

    Results are cached per (sample_rate, n_fft, n_mels, f_min, f_max).
    """
    cfg = cfg.resolve(sample_rate)
    return _filterbank(int(sample_rate), cfg.n_fft, cfg.n_mels, float(cfg.f_min), float(cfg.f_max))


# ---------------------------------------------------------------------------
# 2-D maps
# ---------------------------------------------------------------------------

def resize_to_map(matrix) -> np.ndarray:
    """Bilinear, corner-aligned resampling of an H x W matrix onto 32 x 32 x 1."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if m.shape == (MAP_SIZE, MAP_SIZE):
        return m.copy()[:, :, None]

    def axis_weights(n):
        pos = np.arange(MAP_SIZE) * ((n - 1) / (MAP_SIZE - 1))
        i0 = np.minimum(np.floor(pos).astype(np.int64), n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, pos - i0

    r0, r1, rf = axis_weights(m.shape[0])
    rows = m[r0] * (1.0 - rf)[:, None] + m[r1] * rf[:, None]
    c0, c1, cf = axis_weights(m.shape[1])
    out = rows[:, c0] * (1.0 - cf)[None, :] + rows[:, c1] * cf[None, :]
    return out[:, :, None]


def normalize_map(fmap) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    x = np.asarray(fmap, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def dct_basis(n: int) -> np.ndarray:
    return _dct_basis(int(n))


@functools.lru_cache(maxsize=16)
def _dct_basis(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    basis[0] *= np.sqrt(1.0 / n)
    basis[1:] *= np.sqrt(2.0 / n)
    basis.setflags(write=False)
    return basis


def dct_ii(x, axis: int = 0) -> np.ndarray:
    """Orthonormal DCT-II along ``axis``."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    out = np.tensordot(dct_basis(x.shape[0]), x, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# extractors
# ---------------------------------------------------------------------------

def log_mel_energies(clip: AudioClip, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Natural-log mel energies, shape ``(n_mels, n_frames)``."""
    cfg = cfg.resolve(clip.sample_rate)
    fb = build_mel_filterbank(clip.sample_rate, cfg)
    spectra = power_spectra(frame_signal(clip.samples, cfg), cfg)
    return np.log(fb.weights @ spectra.T + cfg.log_floor)


def mfcc_matrix(clip: AudioClip, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """First ``n_mfcc`` cepstral coefficients per frame, shape ``(n_mfcc, n_frames)``."""
    cfg = cfg.resolve(clip.sample_rate)
    return dct_ii(log_mel_energies(clip, cfg), axis=0)[:cfg.n_mfcc]


def zcr_values(clip: AudioClip, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Per-frame zero crossing rate in [0, 1]."""
    cfg = cfg.resolve(clip.sample_rate)
    frames = frame_signal(clip.samples, cfg)
    return zero_crossing_rate(frames)


def zero_crossing_rate(frames) -> np.ndarray:
    """Fraction of adjacent pairs with opposite sign in each row; zero counts as positive."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] < 2:
        raise BadFrameLength("a zero crossing rate needs at least two samples per frame")
    return _kernels.sign_changes(frames) / (frames.shape[1] - 1)


def mel_spectrogram(clip: AudioClip, cfg: DspConfig = DspConfig()) -> np.ndarray:
    return resize_to_map(log_mel_energies(clip, cfg))


def mfcc(clip: AudioClip, cfg: DspConfig = DspConfig()) -> np.ndarray:
    return resize_to_map(mfcc_matrix(clip, cfg))


def zcr(clip: AudioClip, cfg: DspConfig = DspConfig()) -> np.ndarray:
    rates = zcr_values(clip, cfg)
    return resize_to_map(np.tile(rates, (MAP_SIZE, 1)))


_EXTRACTORS = {
    FeatureKind.MS: mel_spectrogram,
    FeatureKind.MFCC: mfcc,
    FeatureKind.ZCR: zcr,
}


def extract(clip: AudioClip, kind, cfg: DspConfig = DspConfig()) -> np.ndarray:
    fmap = _EXTRACTORS[FeatureKind.parse(kind)](clip, cfg)
    if fmap.shape != MAP_SHAPE or not np.all(np.isfinite(fmap)):
        raise ValueError(f"extractor produced an invalid map of shape {fmap.shape}")
    return fmap


# ---------------------------------------------------------------------------
# on-disk feature maps: 8-byte header + 32*32 little-endian float32
# ---------------------------------------------------------------------------

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_PAYLOAD = MAP_SIZE * MAP_SIZE * 4


def encode_feature_map(fmap) -> bytes:
    x = np.asarray(fmap)
    if x.shape not in (MAP_SHAPE, (MAP_SIZE, MAP_SIZE)):
        raise ValueError(f"feature map must be 32x32x1, got {x.shape}")
    return FMAP_MAGIC + struct.pack("<I", FMAP_VERSION) + x.astype("<f4").tobytes(order="C")


def decode_feature_map(data: bytes) -> np.ndarray:
    if len(data) != 8 + _FMAP_PAYLOAD:
        raise CorruptFeatureMap(f"expected {8 + _FMAP_PAYLOAD} bytes, got {len(data)}")
    if data[:4] != FMAP_MAGIC:
        raise CorruptFeatureMap("bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FMAP_VERSION:
        raise CorruptFeatureMap(f"unsupported feature map version {version}")
    return np.frombuffer(data, dtype="<f4", offset=8).astype(np.float32).reshape(MAP_SHAPE)


def save_feature_map(path, fmap) -> None:
    Path(path).write_bytes(encode_feature_map(fmap))


def load_feature_map(path) -> np.ndarray:
    return decode_feature_map(Path(path).read_bytes())
