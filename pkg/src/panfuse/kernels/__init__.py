"""Hot numeric kernels behind the convolution layers.

A compiled Cython core is preferred; a pure-numpy fallback with identical
semantics (including float accumulation order in col2im) is selected at
import time when the extension is unavailable. `BACKEND` reports which one
is active; both can be imported explicitly for benchmarking.
"""

import numpy as np

from . import _fallback

try:
    from . import _core as _impl

    BACKEND = "cython"
except ImportError:  # extension not built
    _impl = _fallback
    BACKEND = "numpy"


def im2col(x, k):
    if x.dtype != np.float32:  # compiled core is float32-only
        return _fallback.im2col(x, k)
    return _impl.im2col(x, k)


def col2im(cols, n, c, h, w, k):
    if cols.dtype != np.float32:
        return _fallback.col2im(cols, n, c, h, w, k)
    return _impl.col2im(cols, n, c, h, w, k)


__all__ = ["BACKEND", "im2col", "col2im"]
