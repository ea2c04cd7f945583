"""Deterministic tone corpus: class k is a sine at 300 + 150*k Hz in white noise."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import write_wav

SAMPLE_RATE = 8000
DURATION = 1.5
AMPLITUDE = 0.5
SNR_DB = 20.0


def tone_frequency(label: int) -> float:
    return 300.0 + 150.0 * label


def synth_clip(label: int, rng, sample_rate: int = SAMPLE_RATE, duration: float = DURATION,
               amplitude: float = AMPLITUDE, snr_db: float = SNR_DB) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    tone = amplitude * np.sin(2 * np.pi * tone_frequency(label) * t + phase)
    noise_power = (amplitude ** 2 / 2) / 10 ** (snr_db / 10)
    noisy = tone + rng.normal(0.0, np.sqrt(noise_power), n)
    return np.clip(noisy, -1.0, 1.0)


def write_synth_corpus(out_dir, classes: int = 10, per_class: int = 30, seed: int = 0,
                       sample_rate: int = SAMPLE_RATE) -> list:
    """Write ``classes * per_class`` WAV files named ``<class>_synth_<index>.wav``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for label in range(classes):
        for i in range(per_class):
            path = out / f"{label}_synth_{i}.wav"
            write_wav(path, synth_clip(label, rng, sample_rate), sample_rate)
            paths.append(path)
    return paths
