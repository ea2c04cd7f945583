"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorised
pure-numpy version.  The active backend is picked once at import time from the
``DIGIT_ENSEMBLE_BACKEND`` environment variable (``numba`` or ``numpy``) and
can be switched at runtime with :func:`set_backend`.  Both backends must give
the same answers; the test-suite runs every kernel through both.
"""

from __future__ import annotations

import os
import warnings
from contextlib import contextmanager

import numpy as np

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

ENV_FLAG = "DIGIT_ENSEMBLE_BACKEND"
BACKENDS = ("numba", "numpy")


def _initial_backend() -> str:
    requested = os.environ.get(ENV_FLAG, "numba").strip().lower()
    if requested not in BACKENDS:
        warnings.warn(f"unknown {ENV_FLAG}={requested!r}, using numpy")
        return "numpy"
    if requested == "numba" and not HAS_NUMBA:
        warnings.warn("numba not installed, falling back to numpy kernels")
        return "numpy"
    return requested


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    _backend = name


@contextmanager
def use_backend(name: str):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _njit(func):
    if HAS_NUMBA:
        return numba.njit(cache=True)(func)
    return func


# ---------------------------------------------------------------------------
# radix-2 FFT over the rows of a 2-D complex array
# ---------------------------------------------------------------------------

def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@_njit
def _fft_rows_nb(x):
    rows, n = x.shape
    out = np.empty_like(x)
    bits = 0
    while (1 << bits) < n:
        bits += 1
    for i in range(n):
        r = 0
        v = i
        for _ in range(bits):
            r = (r << 1) | (v & 1)
            v >>= 1
        for row in range(rows):
            out[row, r] = x[row, i]
    m = 2
    while m <= n:
        half = m // 2
        for k in range(half):
            angle = -2.0 * np.pi * k / m
            w = complex(np.cos(angle), np.sin(angle))
            for start in range(0, n, m):
                for row in range(rows):
                    a = out[row, start + k]
                    b = out[row, start + k + half] * w
                    out[row, start + k] = a + b
                    out[row, start + k + half] = a - b
        m *= 2
    return out


def _fft_rows_np(x: np.ndarray) -> np.ndarray:
    rows, n = x.shape
    a = x[:, _bit_reverse_indices(n)]
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = a.reshape(rows, n // m, m)
        even = blocks[:, :, :half]
        odd = blocks[:, :, half:] * w
        a = np.concatenate([even + odd, even - odd], axis=2).reshape(rows, n)
        m *= 2
    return a


def fft_rows(x: np.ndarray) -> np.ndarray:
    """Complex DFT of every row of ``x``; the row length must be a power of two."""
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.complex128)
    n = x.shape[1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    if n == 1:
        return x.copy()
    if _backend == "numba":
        return _fft_rows_nb(x)
    return _fft_rows_np(x)


# ---------------------------------------------------------------------------
# zero crossings
# ---------------------------------------------------------------------------

@_njit
def _sign_changes_nb(frames):
    rows, n = frames.shape
    out = np.zeros(rows, dtype=np.int64)
    for r in range(rows):
        count = 0
        prev = frames[r, 0] >= 0.0
        for i in range(1, n):
            cur = frames[r, i] >= 0.0
            if cur != prev:
                count += 1
            prev = cur
        out[r] = count
    return out


def _sign_changes_np(frames: np.ndarray) -> np.ndarray:
    positive = frames >= 0.0
    return np.count_nonzero(positive[:, 1:] != positive[:, :-1], axis=1).astype(np.int64)


def sign_changes(frames: np.ndarray) -> np.ndarray:
    """Per-row count of adjacent pairs whose signs differ (zero counts as positive)."""
    frames = np.ascontiguousarray(np.atleast_2d(frames), dtype=np.float64)
    if _backend == "numba":
        return _sign_changes_nb(frames)
    return _sign_changes_np(frames)


# ---------------------------------------------------------------------------
# 3x3 valid convolution helpers, NHWC layout
# ---------------------------------------------------------------------------

@_njit
def _im2col3_nb(x):
    n, h, w, c = x.shape
    ho = h - 2
    wo = w - 2
    cols = np.empty((n, ho, wo, 9 * c), dtype=x.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                p = 0
                for di in range(3):
                    for dj in range(3):
                        for ch in range(c):
                            cols[b, i, j, p] = x[b, i + di, j + dj, ch]
                            p += 1
    return cols


def _im2col3_np(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
    # win: (n, ho, wo, c, 3, 3) -> (n, ho, wo, 3, 3, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h - 2, w - 2, 9 * c)


def im2col3(x: np.ndarray) -> np.ndarray:
    """Unfold 3x3 patches: (N, H, W, C) -> (N, H-2, W-2, 9*C), patch order (di, dj, c)."""
    x = np.ascontiguousarray(x)
    if _backend == "numba":
        return _im2col3_nb(x)
    return _im2col3_np(x)


@_njit
def _col2im3_nb(cols, h, w):
    n, ho, wo, k = cols.shape
    c = k // 9
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                p = 0
                for di in range(3):
                    for dj in range(3):
                        for ch in range(c):
                            out[b, i + di, j + dj, ch] += cols[b, i, j, p]
                            p += 1
    return out


def _col2im3_np(cols: np.ndarray, h: int, w: int) -> np.ndarray:
    n, ho, wo, k = cols.shape
    c = k // 9
    patches = cols.reshape(n, ho, wo, 3, 3, c)
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            out[:, di:di + ho, dj:dj + wo, :] += patches[:, :, :, di, dj, :]
    return out


def col2im3(cols: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col3`: scatter-add patch columns back onto an (N, h, w, C) grid."""
    cols = np.ascontiguousarray(cols)
    if _backend == "numba":
        return _col2im3_nb(cols, h, w)
    return _col2im3_np(cols, h, w)


# ---------------------------------------------------------------------------
# 2x2 / stride-2 max pooling with floor semantics, NHWC layout
# ---------------------------------------------------------------------------

@_njit
def _maxpool2_nb(x):
    n, h, w, c = x.shape
    ho = h // 2
    wo = w // 2
    out = np.empty((n, ho, wo, c), dtype=x.dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int8)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = x[b, 2 * i, 2 * j, ch]
                    best_k = 0
                    for k in range(1, 4):
                        v = x[b, 2 * i + k // 2, 2 * j + k % 2, ch]
                        if v > best:
                            best = v
                            best_k = k
                    out[b, i, j, ch] = best
                    arg[b, i, j, ch] = best_k
    return out, arg


def _maxpool2_np(x: np.ndarray):
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    # window element k = 2*row + col
    views = [x[:, k // 2:2 * ho:2, k % 2:2 * wo:2, :] for k in range(4)]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
    # first maximum wins, as in the loop kernel
    arg = np.zeros((n, ho, wo, c), dtype=np.int8)
    found = views[0] == out
    for k in (1, 2):
        hit = views[k] == out
        arg += (hit & ~found).view(np.int8) * np.int8(k)
        found |= hit
    arg += (~found).view(np.int8) * np.int8(3)
    return out, arg


def maxpool2(x: np.ndarray):
    """Return pooled output and the in-window argmax (0..3, first maximum wins)."""
    x = np.ascontiguousarray(x)
    if _backend == "numba":
        return _maxpool2_nb(x)
    return _maxpool2_np(x)


@_njit
def _maxpool2_backward_nb(grad, arg, h, w):
    n, ho, wo, c = grad.shape
    out = np.zeros((n, h, w, c), dtype=grad.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    k = arg[b, i, j, ch]
                    out[b, 2 * i + k // 2, 2 * j + k % 2, ch] = grad[b, i, j, ch]
    return out


def _maxpool2_backward_np(grad: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    n, ho, wo, c = grad.shape
    onehot = arg[:, :, :, None, :] == np.arange(4, dtype=np.int8)[None, None, None, :, None]
    spread = onehot * grad[:, :, :, None, :]
    spread = spread.reshape(n, ho, wo, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * ho, 2 * wo, c)
    out = np.zeros((n, h, w, c), dtype=grad.dtype)
    out[:, :2 * ho, :2 * wo, :] = spread
    return out


def maxpool2_backward(grad: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    grad = np.ascontiguousarray(grad)
    arg = np.ascontiguousarray(arg)
    if _backend == "numba":
        return _maxpool2_backward_nb(grad, arg, h, w)
    return _maxpool2_backward_np(grad, arg, h, w)
