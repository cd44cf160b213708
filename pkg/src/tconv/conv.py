"""Dense 3D cross-correlation over ``(N, C, T, W, H)`` inputs.

Weights are ``(C_out, C_in, D, KW, KH)``. Two kernels share one contract:
``conv3d`` (im2col + matmul, differentiable) and ``conv3d_direct`` (loop over
filter taps, forward only) which serves as the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DTYPE, ContractError, Tensor, _as_tensor, record

__all__ = ["ConvGeometry", "conv3d", "conv3d_direct", "conv2d"]


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ContractError(f"expected 3 values, got {v}")
    return v


@dataclass(frozen=True)
class ConvGeometry:
    c_in: int
    c_out: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.stride) < 1 or min(self.kernel) < 1 or min(self.padding) < 0:
            raise ContractError(f"invalid geometry {self}")

    def output_shape(self, in_shape) -> tuple[int, int, int]:
        out = tuple((n + 2 * p - k) // s + 1
                    for n, p, k, s in zip(in_shape, self.padding, self.kernel, self.stride))
        if min(out) < 1:
            raise ContractError(f"input extent {tuple(in_shape)} too small for {self}")
        return out

    def check(self, x_shape, w_shape) -> tuple[int, int, int]:
        if len(x_shape) != 5:
            raise ContractError(f"input must be (N, C, T, W, H), got {x_shape}")
        if tuple(w_shape) != (self.c_out, self.c_in) + self.kernel:
            raise ContractError(f"weights {tuple(w_shape)} do not match {self}")
        if x_shape[1] != self.c_in:
            raise ContractError(f"input has {x_shape[1]} channels, layer expects {self.c_in}")
        return self.output_shape(x_shape[2:])


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _columns(xp: np.ndarray, kernel, stride, out_shape) -> np.ndarray:
    """(N * T' * W' * H', C * D * KW * KH) patch matrix."""
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    st, sw, sh = stride
    To, Wo, Ho = out_shape
    win = win[:, :, : st * To : st, : sw * Wo : sw, : sh * Ho : sh]
    N, C = xp.shape[:2]
    # (N, T', W', H', C, D, KW, KH)
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(N * To * Wo * Ho, -1)


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """``y[n, o, a, b, c] = bias[o] + sum_{k,t,i,j} w[o, k, t, i, j] x[n, k, a*st + t, b*sw + i, c*sh + j]``.

    Linear (no activation). ``x`` is zero-padded by ``padding`` per axis.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    geom = ConvGeometry(weight.shape[1], weight.shape[0], weight.shape[2:], stride, padding)
    out_shape = geom.check(x.shape, weight.shape)
    if bias is not None and bias.shape != (geom.c_out,):
        raise ContractError(f"bias must be ({geom.c_out},), got {bias.shape}")
    N = x.shape[0]
    xp = _pad(x.data, geom.padding)
    cols = _columns(xp, geom.kernel, geom.stride, out_shape)
    wmat = weight.data.reshape(geom.c_out, -1)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    y = y.reshape((N,) + out_shape + (geom.c_out,)).transpose(0, 4, 1, 2, 3)
    inputs = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        gmat = g.transpose(0, 2, 3, 4, 1).reshape(-1, geom.c_out)
        grads = [None, None, None]
        if weight.requires_grad:
            grads[1] = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            grads[2] = gmat.sum(axis=0)
        if x.requires_grad:
            # (C, D, KW, KH, N, T', W', H'), produced contiguous by the matmul
            gcols = (wmat.T @ gmat.T).reshape((geom.c_in,) + geom.kernel + (N,) + out_shape)
            gxp = np.zeros((geom.c_in, N) + xp.shape[2:], dtype=DTYPE)
            st, sw, sh = geom.stride
            To, Wo, Ho = out_shape
            D, KW, KH = geom.kernel
            for t in range(D):
                for i in range(KW):
                    for j in range(KH):
                        gxp[:, :, t: t + st * To: st, i: i + sw * Wo: sw, j: j + sh * Ho: sh] += gcols[:, t, i, j]
            gxp = gxp.transpose(1, 0, 2, 3, 4)
            pt, pw, ph = geom.padding
            grads[0] = gxp[:, :, pt: xp.shape[2] - pt, pw: xp.shape[3] - pw, ph: xp.shape[4] - ph]
        return grads[: len(inputs)]

    return record(y, inputs, backward)


def conv3d_direct(x, weight, bias=None, stride=1, padding=0) -> np.ndarray:
    """Reference kernel: accumulate one filter tap at a time (no gradient)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=DTYPE)
    geom = ConvGeometry(w.shape[1], w.shape[0], w.shape[2:], stride, padding)
    To, Wo, Ho = geom.check(x.shape, w.shape)
    xp = _pad(x, geom.padding)
    st, sw, sh = geom.stride
    y = np.zeros((x.shape[0], geom.c_out, To, Wo, Ho), dtype=DTYPE)
    for o in range(geom.c_out):
        for k in range(geom.c_in):
            for t in range(geom.kernel[0]):
                for i in range(geom.kernel[1]):
                    for j in range(geom.kernel[2]):
                        y[:, o] += w[o, k, t, i, j] * xp[:, k, t: t + st * To: st, i: i + sw * Wo: sw, j: j + sh * Ho: sh]
        if bias is not None:
            y[:, o] += np.asarray(bias.data if isinstance(bias, Tensor) else bias)[o]
    return y


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """2D special case: ``x (N, C, W, H)``, ``weight (C_out, C_in, KW, KH)``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 4D input and weights, got {x.shape} and {weight.shape}")
    s = (1,) + tuple(_triple(stride)[1:]) if not isinstance(stride, int) else (1, stride, stride)
    p = (0,) + tuple(_triple(padding)[1:]) if not isinstance(padding, int) else (0, padding, padding)
    y = conv3d(x.reshape(x.shape[:2] + (1,) + x.shape[2:]),
               weight.reshape(weight.shape[:2] + (1,) + weight.shape[2:]), bias, s, p)
    return y.reshape(y.shape[:2] + y.shape[3:])
