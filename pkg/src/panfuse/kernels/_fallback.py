"""Numpy reference implementation of the convolution kernels.

Same contracts as the Cython core in `_core.pyx`; col2im accumulates in
(ki, kj) order so both backends produce bit-identical float32 results.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k):
    """Unfold valid k x k patches of x (N, C, H, W) into a matrix.

    Returns (N*OH*OW, C*k*k) in the input dtype with OH = H-k+1, OW = W-k+1;
    row order is (n, oh, ow), column order is (c, ki, kj).
    """
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    # windows: (N, C, OH, OW, k, k) -> (N, OH, OW, C, k, k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, h, w, k):
    """Adjoint of im2col: scatter-add columns back to an (N, C, H, W) grid."""
    oh, ow = h - k + 1, w - k + 1
    if cols.shape != (n * oh * ow, c * k * k):
        raise ValueError("col2im: cols shape %r inconsistent with (%d,%d,%d,%d,k=%d)"
                         % (cols.shape, n, c, h, w, k))
    patches = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + oh, kj:kj + ow] += patches[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return out
