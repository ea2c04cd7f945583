import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from digit_ensemble import _kernels as K


def both(fn, *args):
    out = []
    for name in K.BACKENDS:
        with K.use_backend(name):
            out.append(fn(*args))
    return out


def naive_im2col3(x):
    n, h, w, c = x.shape
    cols = np.empty((n, h - 2, w - 2, 9 * c), dtype=x.dtype)
    for i in range(h - 2):
        for j in range(w - 2):
            cols[:, i, j, :] = x[:, i:i + 3, j:j + 3, :].reshape(n, 9 * c)
    return cols


def naive_maxpool(x):
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.int8)
    for idx in np.ndindex(out.shape):
        b, i, j, ch = idx
        window = [x[b, 2 * i + k // 2, 2 * j + k % 2, ch] for k in range(4)]
        arg[idx] = window.index(max(window))
        out[idx] = max(window)
    return out, arg


class TestAgreement:
    def test_im2col(self, rng):
        x = rng.standard_normal((2, 6, 5, 3))
        a, b = both(K.im2col3, x)
        assert np.array_equal(a, b) and np.array_equal(a, naive_im2col3(x))

    def test_col2im_is_adjoint(self, rng):
        # <im2col(x), y> == <x, col2im(y)>
        x = rng.standard_normal((2, 7, 6, 3))
        y = rng.standard_normal((2, 5, 4, 27))
        for name in K.BACKENDS:
            with K.use_backend(name):
                lhs = np.sum(K.im2col3(x) * y)
                rhs = np.sum(x * K.col2im3(y, 7, 6))
                assert lhs == pytest.approx(rhs, rel=1e-12)
        a, b = both(K.col2im3, y, 7, 6)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_maxpool_with_ties(self, h, w, c, seed):
        # small integers make ties common; odd sizes exercise the floor crop
        x = np.random.default_rng(seed).integers(0, 3, (2, h, w, c)).astype(np.float32)
        (oa, aa), (ob, ab) = both(K.maxpool2, x)
        on, an = naive_maxpool(x)
        assert np.array_equal(oa, on) and np.array_equal(ob, on)
        assert np.array_equal(aa, an) and np.array_equal(ab, an)

    def test_maxpool_backward(self, rng):
        x = rng.standard_normal((2, 7, 5, 3))
        _, arg = K.maxpool2(x)
        g = rng.standard_normal(arg.shape)
        a, b = both(K.maxpool2_backward, g, arg, 7, 5)
        assert np.array_equal(a, b)
        assert a[:, 6, :, :].sum() == 0 and a[:, :, 4, :].sum() == 0
        assert a.sum() == pytest.approx(g.sum())

    def test_sign_changes(self, rng):
        frames = rng.standard_normal((5, 33))
        frames[0, 10:14] = 0.0
        a, b = both(K.sign_changes, frames)
        ref = np.sum((frames[:, 1:] >= 0) != (frames[:, :-1] >= 0), axis=1)
        assert np.array_equal(a, ref) and np.array_equal(b, ref)

    def test_fft_power_of_two_only(self):
        for name in K.BACKENDS:
            with K.use_backend(name), pytest.raises(ValueError):
                K.fft_rows(np.zeros((1, 12)))


class TestBackendSelection:
    def test_use_backend_restores(self):
        before = K.get_backend()
        with K.use_backend("numpy"):
            assert K.get_backend() == "numpy"
        assert K.get_backend() == before

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            K.set_backend("cuda")

    @pytest.mark.parametrize("value,expected", [("numpy", "numpy"), ("numba", "numba"), ("NUMPY", "numpy")])
    def test_env_flag(self, value, expected):
        env = dict(os.environ, **{K.ENV_FLAG: value})
        res = subprocess.run([sys.executable, "-c", "from digit_ensemble import get_backend; print(get_backend())"],
                             env=env, capture_output=True, text=True, check=True)
        assert res.stdout.strip() == expected
