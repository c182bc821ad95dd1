"""Dense layer primitives with matching hand-written backward passes.

Convolutions run as strided window views contracted with tensordot, so
the heavy lifting is a BLAS matmul. The transposed convolution is the
exact adjoint of the strided convolution: zero-stuff the input, pad with
k-1-p (plus output_padding on the far edges), and correlate at stride 1
with the spatially flipped kernel.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided (N, C, H_out, W_out, k, k) view of an already-padded x."""
    n, c, h, w = x.shape
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(n, c, h_out, w_out, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _pad_hw(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def _stuff(x: np.ndarray, stride: int) -> np.ndarray:
    """Insert stride-1 zeros between neighbors along both spatial axes."""
    if stride == 1:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=x.dtype)
    out[:, :, ::stride, ::stride] = x
    return out


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2, pad: int = 1) -> np.ndarray:
    """Strided correlation. x: (N, C_in, H, W); w: (C_out, C_in, k, k)."""
    k = w.shape[2]
    win = _windows(_pad_hw(x, pad, pad, pad, pad), k, stride)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H_out, W_out, C_out)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray, stride: int = 2, pad: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. (input, weight, bias)."""
    k = w.shape[2]
    win = _windows(_pad_hw(x, pad, pad, pad, pad), k, stride)
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C_in, k, k)
    gb = gy.sum(axis=(0, 2, 3))

    # adjoint scatter: gx[y] += gy[i] w[u] at y = stride*i + u - pad
    out_pad = (x.shape[2] + 2 * pad - k) % stride
    z = _pad_hw(_stuff(gy, stride), k - 1 - pad, k - 1 - pad + out_pad, k - 1 - pad, k - 1 - pad + out_pad)
    wf = w[:, :, ::-1, ::-1]
    zwin = _windows(z, k, 1)
    gx = np.tensordot(zwin, wf, axes=([1, 4, 5], [0, 2, 3]))  # contract C_out -> C_in
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb


def deconv2d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2, pad: int = 1, out_pad: int = 1
) -> np.ndarray:
    """Transposed convolution. x: (N, C_in, H, W); w: (C_in, C_out, k, k).

    Output side = stride*(H-1) + k - 2*pad + out_pad.
    """
    k = w.shape[2]
    z = _pad_hw(_stuff(x, stride), k - 1 - pad, k - 1 - pad + out_pad, k - 1 - pad, k - 1 - pad + out_pad)
    wf = w[:, :, ::-1, ::-1]
    zwin = _windows(z, k, 1)
    y = np.tensordot(zwin, wf, axes=([1, 4, 5], [0, 2, 3]))  # (N, H_out, W_out, C_out)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def deconv2d_backward(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray, stride: int = 2, pad: int = 1, out_pad: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of deconv2d w.r.t. (input, weight, bias).

    The input gradient is the forward strided correlation applied to gy;
    the weight gradient contracts x with strided windows of padded gy.
    """
    k = w.shape[2]
    gb = gy.sum(axis=(0, 2, 3))
    gy_pad = _pad_hw(gy, pad, pad + out_pad, pad, pad + out_pad)
    gwin = _windows(gy_pad, k, stride)[:, :, : x.shape[2], : x.shape[3]]
    # gx[n,c,i,j] = sum_{o,u,v} gy_pad[n,o,stride*i+u, stride*j+v] w[c,o,u,v]
    gx = np.tensordot(gwin, w, axes=([1, 4, 5], [1, 2, 3]))
    # gw[c,o,u,v] = sum_{n,i,j} x[n,c,i,j] gy_pad[n,o,stride*i+u, stride*j+v]
    gw = np.tensordot(x, gwin, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (N, in), w: (out, in)."""
    return x @ w.T + b


def linear_backward(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return gy @ w, gy.T @ x, gy.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, gy, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """y is the forward output."""
    return gy * y * (1.0 - y)
