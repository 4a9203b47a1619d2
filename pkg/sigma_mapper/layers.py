"""
Network layers for the sigma-map estimator
Numpy forward/backward pairs on (N, C, H, W) float64 tensors.

Kernels:
    conv        w (out, in, k, k), stride 1, reflective padding k // 2 ("same")
    stride conv w (out, in, 2, 2), stride 2, halves H and W
    upsample    nearest neighbour x2; a 1x1 conv before it makes a 2x2 stride-2
                transposed conv whose four taps share one weight matrix

Convolutions go through im2col and a single matmul. Reflective padding mirrors
without repeating the edge sample (numpy "reflect"); a length-1 axis is padded
with its only value.
"""

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DimensionError


def reflect_pad(x: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return x
    for axis in (2, 3):
        if 1 < x.shape[axis] <= p:
            raise DimensionError(f"Cannot reflect-pad an axis of length {x.shape[axis]} by {p}")
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")


def _fold_last_axis(d: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of reflect padding along the last axis"""
    n = d.shape[-1] - 2 * p
    core = d[..., p:p + n].copy()
    if n == 1:
        core[..., 0] += d[..., :p].sum(axis=-1) + d[..., p + 1:].sum(axis=-1)
        return core
    for j in range(1, p + 1):
        core[..., j] += d[..., p - j]
        core[..., n - 1 - j] += d[..., p + n - 1 + j]
    return core


def reflect_unpad(d: np.ndarray, p: int) -> np.ndarray:
    """Gradient of reflect_pad: fold the padded border back onto the pixels it mirrors"""
    if not p:
        return d
    d = _fold_last_axis(d, p)
    d = _fold_last_axis(d.swapaxes(2, 3), p).swapaxes(2, 3)
    return np.ascontiguousarray(d)


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """(N*H*W, C*k*k) patch matrix of an already padded tensor"""
    n, c = xp.shape[:2]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Same-size convolution; returns (y, cache)"""
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv expects {w.shape[1]} input channels, got {x.shape[1]}")
    n, _, h, wd = x.shape
    k = w.shape[-1]
    xp = reflect_pad(x, k // 2)
    y = _im2col(xp, k, h, wd) @ w.reshape(w.shape[0], -1).T + b
    return np.ascontiguousarray(y.reshape(n, h, wd, -1).transpose(0, 3, 1, 2)), xp


def conv_backward(dy: np.ndarray, xp: np.ndarray, w: np.ndarray):
    """Returns (dx, dw, db)"""
    o, c, k, _ = w.shape
    n, _, h, wd = dy.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    db = dy_mat.sum(axis=0)
    dw = (dy_mat.T @ _im2col(xp, k, h, wd)).reshape(w.shape)
    dcols = (dy_mat @ w.reshape(o, -1)).reshape(n, h, wd, c, k, k)
    dxp = np.zeros(xp.shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return reflect_unpad(dxp, k // 2), dw, db


def stride_conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 convolution with stride 2"""
    n, c, h, wd = x.shape
    if c != w.shape[1]:
        raise DimensionError(f"stride conv expects {w.shape[1]} input channels, got {c}")
    if h % 2 or wd % 2:
        raise DimensionError(f"stride conv needs even spatial size, got {h}x{wd}")
    xr = x.reshape(n, c, h // 2, 2, wd // 2, 2)
    y = np.tensordot(xr, w, axes=([1, 3, 5], [1, 2, 3]))  # (N, h, w, O)
    y = y.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(y), xr


def stride_conv_backward(dy: np.ndarray, xr: np.ndarray, w: np.ndarray):
    n, c, h2, _, w2, _ = xr.shape
    db = dy.sum(axis=(0, 2, 3))
    dw = np.tensordot(dy, xr, axes=([0, 2, 3], [0, 2, 4]))  # (O, C, 2, 2)
    dxr = np.tensordot(dy, w, axes=([1], [0]))  # (N, h, w, C, 2, 2)
    dx = dxr.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h2 * 2, w2 * 2)
    return dx, dw, db


def upsample_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2 in both spatial axes"""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(dy: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = dy.shape
    return dy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def softplus_forward(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x), overflow-safe"""
    return np.logaddexp(0.0, x)


def softplus_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * expit(x)
