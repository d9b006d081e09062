"""Pure-numpy versions of the hot convolution/pooling kernels.

Convolution columns are channels-last: ``im2col`` maps an [N,H,W,C] array to
a (N*Ho*Wo, k*k*C) matrix whose rows are output pixels and whose columns are
ordered (ki, kj, c).
"""

import numpy as np


def im2col(x, k, stride, pad):
    N, H, W, C = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((N, Ho, Wo, k, k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + stride * (Ho - 1) + 1:stride,
                                     j:j + stride * (Wo - 1) + 1:stride]
    return cols.reshape(N * Ho * Wo, k * k * C)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of ``im2col``: scatter-add columns back into [N,H,W,C]."""
    N, H, W, C = shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((N, H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    cols = cols.reshape(N, Ho, Wo, k, k, C)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (Ho - 1) + 1:stride,
                j:j + stride * (Wo - 1) + 1:stride] += cols[:, :, :, i, j]
    if pad:
        out = out[:, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def maxpool2(x):
    """Return (pooled, argmax-in-window) for the last two axes.

    Window order is row-major (0: top-left, 1: top-right, 2: bottom-left,
    3: bottom-right); the first maximum wins on ties.
    """
    H, W = x.shape[-2:]
    win = x.reshape(x.shape[:-2] + (H // 2, 2, W // 2, 2))
    win = np.moveaxis(win, -3, -2).reshape(x.shape[:-2] + (H // 2, W // 2, 4))
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(g, arg):
    h, w = g.shape[-2:]
    onehot = (arg[..., None] == np.arange(4, dtype=np.int8)) * g[..., None]
    out = onehot.reshape(g.shape[:-2] + (h, w, 2, 2))
    out = np.moveaxis(out, -2, -3).reshape(g.shape[:-2] + (2 * h, 2 * w))
    return out.astype(g.dtype, copy=False)
