# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution/pooling kernels. Mirrors ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
cimport cython
from cython cimport floating
from libc.string cimport memcpy, memset

cnp.import_array()


cdef inline void _unfold(const floating* x, floating* dst, Py_ssize_t H, Py_ssize_t W,
                         Py_ssize_t C, Py_ssize_t Ho, Py_ssize_t Wo, int k, int stride,
                         int pad) noexcept nogil:
    # all rows of one image; each row is k*k*C values ordered (ki, kj, c).
    # For fixed (oy, ox, ki) the kj span is contiguous in channels-last input.
    cdef Py_ssize_t oy, ox, i, iy, ix0, j0, j1, span = k * C
    cdef size_t fsz = sizeof(floating)
    for oy in range(Ho):
        for ox in range(Wo):
            ix0 = ox * stride - pad
            j0 = -ix0 if ix0 < 0 else 0
            j1 = W - ix0 if ix0 + k > W else k
            for i in range(k):
                iy = oy * stride + i - pad
                if iy < 0 or iy >= H or j1 <= j0:
                    memset(dst, 0, span * fsz)
                else:
                    if j0 > 0:
                        memset(dst, 0, j0 * C * fsz)
                    memcpy(dst + j0 * C, x + (iy * W + ix0 + j0) * C, (j1 - j0) * C * fsz)
                    if j1 < k:
                        memset(dst + j1 * C, 0, (k - j1) * C * fsz)
                dst += span


def _im2col(floating[:, :, :, ::1] x, int k, int stride, int pad,
            floating[:, ::1] cols):
    cdef Py_ssize_t n
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    with nogil:
        for n in range(N):
            _unfold(&x[n, 0, 0, 0], &cols[n * Ho * Wo, 0], H, W, C, Ho, Wo, k, stride, pad)


@cython.wraparound(True)
def im2col(x, int k, int stride, int pad):
    """[N,H,W,C] -> (N*Ho*Wo, k*k*C) channels-last columns."""
    N, H, W, C = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    x = np.ascontiguousarray(x)
    cols = np.empty((N * Ho * Wo, k * k * C), dtype=x.dtype)
    _im2col(x, k, stride, pad, cols)
    return cols


cdef inline void _fold(const floating* src, floating* x, Py_ssize_t H, Py_ssize_t W,
                       Py_ssize_t C, Py_ssize_t Ho, Py_ssize_t Wo, int k, int stride,
                       int pad) noexcept nogil:
    cdef Py_ssize_t oy, ox, i, c, iy, ix0, j0, j1, span = k * C
    cdef floating* d
    cdef const floating* s
    for oy in range(Ho):
        for ox in range(Wo):
            ix0 = ox * stride - pad
            j0 = -ix0 if ix0 < 0 else 0
            j1 = W - ix0 if ix0 + k > W else k
            for i in range(k):
                iy = oy * stride + i - pad
                if iy >= 0 and iy < H and j1 > j0:
                    d = x + (iy * W + ix0 + j0) * C
                    s = src + j0 * C
                    for c in range((j1 - j0) * C):
                        d[c] += s[c]
                src += span


def _col2im(floating[:, ::1] cols, int k, int stride, int pad,
            floating[:, :, :, ::1] out):
    cdef Py_ssize_t n
    cdef Py_ssize_t N = out.shape[0], H = out.shape[1], W = out.shape[2], C = out.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    with nogil:
        for n in range(N):
            _fold(&cols[n * Ho * Wo, 0], &out[n, 0, 0, 0], H, W, C, Ho, Wo, k, stride, pad)


@cython.wraparound(True)
def col2im(cols, shape, int k, int stride, int pad):
    """Adjoint of ``im2col``: scatter-add columns back into [N,H,W,C]."""
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im(np.ascontiguousarray(cols), k, stride, pad, out)
    return out


def _maxpool2(floating[:, :, ::1] x, floating[:, :, ::1] out, signed char[:, :, ::1] arg):
    cdef Py_ssize_t p, y, xx, Ho = out.shape[1], Wo = out.shape[2]
    cdef floating a, best
    cdef signed char which
    with nogil:
        for p in range(x.shape[0]):
            for y in range(Ho):
                for xx in range(Wo):
                    # first maximum wins on ties, in row-major window order
                    best = x[p, 2 * y, 2 * xx]
                    which = 0
                    a = x[p, 2 * y, 2 * xx + 1]
                    if a > best:
                        best = a
                        which = 1
                    a = x[p, 2 * y + 1, 2 * xx]
                    if a > best:
                        best = a
                        which = 2
                    a = x[p, 2 * y + 1, 2 * xx + 1]
                    if a > best:
                        best = a
                        which = 3
                    out[p, y, xx] = best
                    arg[p, y, xx] = which


@cython.wraparound(True)
def maxpool2(x):
    """Return (pooled, argmax-in-window) for the last two axes."""
    shape = x.shape
    H, W = shape[-2], shape[-1]
    flat = np.ascontiguousarray(x).reshape(-1, H, W)
    out = np.empty((flat.shape[0], H // 2, W // 2), dtype=x.dtype)
    arg = np.empty((flat.shape[0], H // 2, W // 2), dtype=np.int8)
    _maxpool2(flat, out, arg)
    return out.reshape(shape[:-2] + (H // 2, W // 2)), arg.reshape(shape[:-2] + (H // 2, W // 2))


def _maxpool2_backward(floating[:, :, ::1] g, signed char[:, :, ::1] arg,
                       floating[:, :, ::1] out):
    cdef Py_ssize_t p, y, xx
    cdef signed char a
    with nogil:
        for p in range(g.shape[0]):
            for y in range(g.shape[1]):
                for xx in range(g.shape[2]):
                    a = arg[p, y, xx]
                    out[p, 2 * y + (a >> 1), 2 * xx + (a & 1)] = g[p, y, xx]


@cython.wraparound(True)
def maxpool2_backward(g, arg):
    shape = g.shape
    h, w = shape[-2], shape[-1]
    gf = np.ascontiguousarray(g).reshape(-1, h, w)
    out = np.zeros((gf.shape[0], 2 * h, 2 * w), dtype=g.dtype)
    _maxpool2_backward(gf, np.ascontiguousarray(arg).reshape(-1, h, w), out)
    return out.reshape(shape[:-2] + (2 * h, 2 * w))
