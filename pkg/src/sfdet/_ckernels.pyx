# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for NHWC convolutions.

Column layout is (ky, kx, channel), matching weights stored as
``(k, k, c_in, c_out)`` and flattened row-major.
"""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n * oh * ow, k * k * c), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, oy, ox, ky, kx, ch, iy, ix, row, col
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (b * oh + oy) * ow + ox
                    for ky in range(k):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= w:
                                continue
                            col = (ky * k + kx) * c
                            for ch in range(c):
                                cols[row, col + ch] = x[b, iy, ix, ch]
    return out


def col2im(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t c, int k, int stride, int pad):
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, oy, ox, ky, kx, ch, iy, ix, row, col
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (b * oh + oy) * ow + ox
                    for ky in range(k):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= w:
                                continue
                            col = (ky * k + kx) * c
                            for ch in range(c):
                                dx[b, iy, ix, ch] += cols[row, col + ch]
    return out
