"""Pure-numpy im2col / col2im, used when the compiled module is unavailable."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    # (n, oh, ow, c, ky, kx) -> (n, oh, ow, ky, kx, c)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * oh * ow, k * k * c)


def col2im(cols: np.ndarray, n: int, h: int, w: int, c: int, k: int, stride: int, pad: int) -> np.ndarray:
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(n, oh, ow, k, k, c)
    dx = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            dx[:, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += cols[:, :, :, ky, kx]
    return np.ascontiguousarray(dx[:, pad:pad + h, pad:pad + w])
