"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation, including the order
in which overlapping contributions are accumulated in ``col2im``, so both
backends produce bit-identical results.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, padding):
    """Unfold ``x`` of shape (N, C, H, W) into (N, C*k*k, H'*W') patches."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (N, C, oh, ow, k, k) -> (N, C, k, k, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols, dtype=np.float64).reshape(n, c * k * k, oh * ow)


def col2im(cols, shape, k, stride, padding):
    """Adjoint of :func:`im2col`: scatter-add patches back to (N, C, H, W)."""
    n, c, h, w = shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    cols = cols.reshape(n, c, k, k, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def hamming_matrix(a, b):
    """Pairwise Hamming distances between packed code rows.

    ``a`` is (n, words) and ``b`` is (m, words), both uint64. Returns an
    (n, m) int64 matrix.
    """
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)
