"""Numpy layer kernels with analytic backward passes. Arrays are NHWC."""

from __future__ import annotations

import numpy as np


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """Zero-padded 'same' convolution (cross-correlation).

    x: (N, H, W, Cin); w: (k, k, Cin, Cout) with odd k; returns (out, cols).
    """
    k = w.shape[0]
    n, h, wd, cin = x.shape
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if k == 1 and stride == 1:
        cols = x
    else:
        xp = _pad(x, pad)
        cols = np.concatenate(
            [
                xp[:, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :]
                for ky in range(k)
                for kx in range(k)
            ],
            axis=-1,
        )
    out = cols.reshape(-1, k * k * cin) @ w.reshape(k * k * cin, -1)
    out += b
    return out.reshape(n, ho, wo, -1), cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray, stride: int = 1):
    """Returns (dx, dw, db)."""
    k = w.shape[0]
    n, h, wd, cin = x_shape
    cout = w.shape[-1]
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, k * k * cin).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k * k * cin)
    if k == 1 and stride == 1:
        return dcols, dw, db
    pad = k // 2
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=dout.dtype)
    i = 0
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :] += (
                dcols[..., i * cin : (i + 1) * cin]
            )
            i += 1
    return dxp[:, pad : pad + h, pad : pad + wd, :], dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dout * (y > 0)


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout: np.ndarray) -> np.ndarray:
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def huber(r: np.ndarray, delta: float = 1.0) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_grad(r: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.clip(r, -delta, delta)
