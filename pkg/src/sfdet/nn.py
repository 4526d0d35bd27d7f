"""Functional NHWC layers with explicit backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np

from sfdet import kernels


def conv_init(rng: np.random.Generator, k: int, c_in: int, c_out: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """He-normal weights of shape (k, k, c_in, c_out) and zero bias."""
    std = np.sqrt(2.0 / (k * k * c_in))
    w = rng.normal(0.0, std, size=(k, k, c_in, c_out)).astype(dtype)
    return w, np.zeros(c_out, dtype=dtype)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int | None = None):
    """Zero-padded convolution; ``pad`` defaults to ``k // 2``."""
    k, _, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ValueError(f"conv expects {c_in} input channels, got {x.shape[-1]}")
    x = np.ascontiguousarray(x, dtype=w.dtype)
    pad = k // 2 if pad is None else pad
    n, h, wd, _ = x.shape
    cols = kernels.im2col(x, k, stride, pad)
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    y = (cols @ w.reshape(-1, c_out) + b).reshape(n, oh, ow, c_out)
    return y, (cols, x.shape, w, stride, pad)


def conv2d_backward(dy: np.ndarray, cache):
    cols, xshape, w, stride, pad = cache
    k, _, c_in, c_out = w.shape
    d2 = dy.reshape(-1, c_out).astype(w.dtype, copy=False)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = np.ascontiguousarray(d2 @ w.reshape(-1, c_out).T)
    n, h, wd, _ = xshape
    dx = kernels.col2im(dcols, n, h, wd, c_in, k, stride, pad)
    return dx, dw, db


def edge_pad_forward(x: np.ndarray, p: int):
    """Replicate the outermost pixels ``p`` times on each spatial side."""
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge"), p


def edge_pad_backward(dy: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return dy
    d = dy.copy()
    d[:, p, :] += d[:, :p].sum(axis=1)
    d[:, -p - 1, :] += d[:, -p:].sum(axis=1)
    d[:, :, p] += d[:, :, :p].sum(axis=2)
    d[:, :, -p - 1] += d[:, :, -p:].sum(axis=2)
    return np.ascontiguousarray(d[:, p:-p, p:-p])


def leaky_relu_forward(x: np.ndarray, slope: float = 0.1):
    mask = x > 0
    return np.where(mask, x, x * slope), (mask, slope)


def leaky_relu_backward(dy: np.ndarray, cache):
    mask, slope = cache
    return np.where(mask, dy, dy * slope)


def upsample2x_forward(x: np.ndarray):
    return x.repeat(2, axis=1).repeat(2, axis=2), x.shape


def upsample2x_backward(dy: np.ndarray, xshape):
    n, h, w, c = xshape
    return dy.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


def _interp_axis(x: np.ndarray, axis: int) -> np.ndarray:
    # out[2i] = x[i], out[2i+1] = (x[i] + x[i+1]) / 2, last neighbour replicated
    nxt = np.concatenate([np.take(x, np.arange(1, x.shape[axis]), axis=axis),
                          np.take(x, [-1], axis=axis)], axis=axis)
    out = np.stack([x, 0.5 * (x + nxt)], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] *= 2
    return out.reshape(shape)


def _interp_axis_backward(dy: np.ndarray, axis: int) -> np.ndarray:
    shape = list(dy.shape)
    shape[axis] //= 2
    shape.insert(axis + 1, 2)
    d = dy.reshape(shape)
    even = np.take(d, 0, axis=axis + 1)
    half = 0.5 * np.take(d, 1, axis=axis + 1)
    dx = even + half
    n = dx.shape[axis]
    idx = [slice(None)] * dx.ndim
    idx[axis] = slice(1, n)
    src = [slice(None)] * dx.ndim
    src[axis] = slice(0, n - 1)
    dx[tuple(idx)] += half[tuple(src)]
    idx[axis] = n - 1
    src[axis] = n - 1
    dx[tuple(idx)] += half[tuple(src)]
    return dx


def upsample2x_linear_forward(x: np.ndarray):
    """2x linear upsampling aligned with stride-2 sampling: even outputs copy
    the input, odd outputs average the two neighbours."""
    return _interp_axis(_interp_axis(x, 1), 2), x.shape


def upsample2x_linear_backward(dy: np.ndarray, xshape) -> np.ndarray:
    return _interp_axis_backward(_interp_axis_backward(dy, 2), 1)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so large |x| never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(z: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy of sigmoid(z) against target."""
    return np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))


class Adam:
    """Adam over a name-keyed parameter set (returns new arrays each step)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = (p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return out
