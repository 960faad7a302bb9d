"""Patch-matrix kernels: layout, adjointness and backend agreement."""

import numpy as np
import pytest

from panfuse import kernels
from panfuse.kernels import _fallback


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "numpy")


def test_im2col_layout_by_hand():
    # single 1-channel 3x3 image, k=2: rows scan output positions row-major,
    # columns scan (channel, ki, kj)
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    cols = kernels.im2col(x, 2)
    assert cols.shape == (4, 4)
    expected = np.array([
        [0, 1, 3, 4],
        [1, 2, 4, 5],
        [3, 4, 6, 7],
        [4, 5, 7, 8],
    ], dtype=np.float32)
    assert np.array_equal(cols, expected)


def test_im2col_channel_blocks(rng):
    x = rng.normal(size=(2, 3, 5, 4)).astype(np.float32)
    cols = kernels.im2col(x, 3)
    assert cols.shape == (2 * 3 * 2, 3 * 9)
    # channel c occupies columns [9c, 9c+9)
    patch = x[1, 2, 1:4, 0:3].reshape(-1)
    row = 1 * (3 * 2) + 1 * 2 + 0
    assert np.array_equal(cols[row, 18:27], patch)


def test_col2im_accumulates_overlaps():
    cols = np.ones((4, 4), dtype=np.float32)  # from a 3x3 input, k=2
    back = kernels.col2im(cols, 1, 1, 3, 3, 2)
    # center pixel participates in all four 2x2 patches
    expected = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float32)
    assert np.array_equal(back[0, 0], expected)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_col2im_is_adjoint_of_im2col(rng, dtype):
    x = rng.normal(size=(2, 3, 7, 6)).astype(dtype)
    k = 3
    cols = kernels.im2col(x, k)
    c = rng.normal(size=cols.shape).astype(dtype)
    lhs = float((cols.astype(np.float64) * c.astype(np.float64)).sum())
    back = kernels.col2im(c, 2, 3, 7, 6, k)
    rhs = float((x.astype(np.float64) * back.astype(np.float64)).sum())
    assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1.0)


def test_dtype_preserved(rng):
    x64 = rng.normal(size=(1, 2, 5, 5))
    assert kernels.im2col(x64, 3).dtype == np.float64
    x32 = x64.astype(np.float32)
    assert kernels.im2col(x32, 3).dtype == np.float32


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled core not built")
class TestBackendAgreement:
    def test_im2col_bitwise(self, rng):
        x = rng.normal(size=(3, 4, 9, 8)).astype(np.float32)
        for k in (1, 3, 5):
            assert np.array_equal(kernels.im2col(x, k), _fallback.im2col(x, k))

    def test_col2im_bitwise(self, rng):
        # float32 accumulation order is part of the contract: both backends
        # must add patch contributions in the same (ki, kj) sequence
        for k in (1, 3, 5):
            oh, ow = 9 - k + 1, 8 - k + 1
            cols = rng.normal(size=(2 * oh * ow, 4 * k * k)).astype(np.float32)
            a = kernels.col2im(cols, 2, 4, 9, 8, k)
            b = _fallback.col2im(cols, 2, 4, 9, 8, k)
            assert np.array_equal(a, b)
