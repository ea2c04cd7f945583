"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel runs on the shapes the pipeline actually sees (a 2 s clip at
8 kHz, a batch of 64 feature maps through the 3-block CNN). The first numba
call is made before timing so compilation is excluded.
"""

import argparse
import timeit

import numpy as np

from digit_ensemble import _kernels
from digit_ensemble.audio_io import AudioClip
from digit_ensemble.features import DspConfig, FeatureKind, extract, frame_signal
from digit_ensemble.nn import Network, build_table1_cnn


def cases(rng):
    frames = rng.standard_normal((199, 256))
    conv_in = rng.standard_normal((64, 15, 15, 64)).astype(np.float32)
    cols = _kernels.im2col3(conv_in)
    pool_in = rng.standard_normal((64, 30, 30, 64)).astype(np.float32)
    pooled, arg = _kernels.maxpool2(pool_in)
    clip = AudioClip(0.5 * np.sin(2 * np.pi * 440 * np.arange(16000) / 8000), 8000)
    zcr_frames = frame_signal(clip.samples, DspConfig().resolve(8000))
    net = Network(build_table1_cnn(), seed=0)
    maps = rng.random((64, 32, 32, 1)).astype(np.float32)
    labels = np.arange(64) % 10

    def train_step():
        net.loss_and_grad(maps, labels, rng=np.random.default_rng(0))
        net.step(0.0)

    return {
        "fft_rows 199x256": lambda: _kernels.fft_rows(frames),
        "sign_changes 199x200": lambda: _kernels.sign_changes(zcr_frames),
        "im2col3 64x15x15x64": lambda: _kernels.im2col3(conv_in),
        "col2im3 64x13x13x576": lambda: _kernels.col2im3(cols, 15, 15),
        "maxpool2 64x30x30x64": lambda: _kernels.maxpool2(pool_in),
        "maxpool2_backward": lambda: _kernels.maxpool2_backward(pooled, arg, 30, 30),
        "extract MS (one clip)": lambda: extract(clip, FeatureKind.MS, DspConfig()),
        "extract ZCR (one clip)": lambda: extract(clip, FeatureKind.ZCR, DspConfig()),
        "train step batch 64": train_step,
    }


def bench(repeat: int) -> list:
    rows = []
    timings = {}
    for backend in _kernels.BACKENDS:
        with _kernels.use_backend(backend):
            for name, fn in cases(np.random.default_rng(0)).items():
                fn()  # warm-up / JIT compile
                number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
                best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
                timings[(name, backend)] = best * 1e3
    for name in cases(np.random.default_rng(0)):
        nb, np_ = timings[(name, "numba")], timings[(name, "numpy")]
        rows.append((name, nb, np_, np_ / nb))
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rows = bench(args.repeat)
    print(f"{'kernel':<26}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, nb, np_, ratio in rows:
        print(f"{name:<26}{nb:>12.4f}{np_:>12.4f}{ratio:>9.2f}x")


if __name__ == "__main__":
    main()
