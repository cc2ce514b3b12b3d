"""Strided N-d convolution and its adjoint (transposed convolution).

Both work for 2D ``(N, C, H, W)`` and 3D ``(N, C, D, H, W)`` inputs through the
same im2col/col2im pair, which is what lets the encoder and decoder switch
between 2D and 3D purely on input rank.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, ParameterError, Tensor, record

__all__ = ["conv", "transposed_conv", "conv_output_shape", "transposed_output_shape"]


def _tuple(v, n: int, name: str) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise DimensionError(f"{name} needs {n} entries, got {v}")
    return v


def conv_output_shape(spatial, kernel, stride, padding) -> tuple:
    return tuple((s + 2 * p - k) // st + 1 for s, k, st, p in zip(spatial, kernel, stride, padding))


def transposed_output_shape(spatial, kernel, stride) -> tuple:
    return tuple((s - 1) * st + k for s, k, st in zip(spatial, kernel, stride))


def _im2col(x: np.ndarray, kernel: tuple, stride: tuple, out_sp: tuple) -> np.ndarray:
    """(N, C, *S) -> (N, *out_sp, C, *kernel) patch matrix (a copy)."""
    nd = len(kernel)
    axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(x, kernel, axis=axes)
    win = win[(slice(None), slice(None)) + tuple(slice(0, st * (o - 1) + 1, st) for st, o in zip(stride, out_sp))]
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    return np.ascontiguousarray(win.transpose(order))


def _col2im(cols: np.ndarray, shape: tuple, kernel: tuple, stride: tuple, out_sp: tuple) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into an (N, C, *S) grid."""
    nd = len(kernel)
    out = np.zeros(shape, dtype=cols.dtype)
    # cols: (N, *out_sp, C, *kernel) -> (N, C, *out_sp, *kernel)
    order = (0, 1 + nd) + tuple(range(1, 1 + nd)) + tuple(range(2 + nd, 2 + 2 * nd))
    c = cols.transpose(order)
    for off in itertools.product(*[range(k) for k in kernel]):
        sl = tuple(slice(o, o + st * (n - 1) + 1, st) for o, st, n in zip(off, stride, out_sp))
        out[(slice(None), slice(None)) + sl] += c[(Ellipsis,) + off]
    return out


def _check_input(x: Tensor, w: Tensor, op: str) -> int:
    if x.ndim not in (4, 5):
        raise DimensionError(f"{op}: input must be rank 4 or 5, got {x.shape}")
    if w.ndim != x.ndim:
        raise DimensionError(f"{op}: kernel rank {w.ndim} does not match input rank {x.ndim}")
    return x.ndim - 2


def conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation with kernel ``weight`` of shape (C_out, C_in, *k)."""
    nd = _check_input(x, weight, "conv")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    kernel = weight.shape[2:]
    stride = _tuple(stride, nd, "stride")
    padding = _tuple(padding, nd, "padding")
    if min(stride) < 1 or min(padding) < 0:
        raise ParameterError(f"conv: bad stride {stride} / padding {padding}")
    out_sp = conv_output_shape(x.shape[2:], kernel, stride, padding)
    if min(out_sp) < 1:
        raise DimensionError(f"conv: kernel {kernel} larger than padded input {x.shape[2:]}")

    xd = x.data
    if any(padding):
        xd = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    n, c_out = x.shape[0], weight.shape[0]
    cols = _im2col(xd, kernel, stride, out_sp)
    m = cols.reshape(-1, int(np.prod(cols.shape[1 + nd:])))
    wf = weight.data.reshape(c_out, -1)
    out = m @ wf.T
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"conv: bias shape {bias.shape} vs {c_out} output channels")
        out += bias.data
        inputs.append(bias)
    out = np.ascontiguousarray(np.moveaxis(out.reshape(n, *out_sp, c_out), -1, 1))
    padded_shape, in_shape = xd.shape, x.shape

    def backward(g):
        gf = np.moveaxis(g, 1, -1).reshape(-1, c_out)
        gw = (gf.T @ m).reshape(weight.shape)
        gcols = (gf @ wf).reshape(cols.shape)
        gx = _col2im(gcols, padded_shape, kernel, stride, out_sp)
        if any(padding):
            gx = gx[(slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, in_shape[2:]))]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gf.sum(axis=0))
        return grads

    return record("conv", out, inputs, backward)


def transposed_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1) -> Tensor:
    """Adjoint of :func:`conv` (no padding); ``weight`` is (C_in, C_out, *k)."""
    nd = _check_input(x, weight, "transposed_conv")
    if weight.shape[0] != x.shape[1]:
        raise DimensionError(
            f"transposed_conv: input has {x.shape[1]} channels, kernel expects {weight.shape[0]}"
        )
    stride = _tuple(stride, nd, "stride")
    if min(stride) < 1:
        raise ParameterError(f"transposed_conv: stride must be >= 1, got {stride}")
    kernel = weight.shape[2:]
    n, c_in, c_out = x.shape[0], weight.shape[0], weight.shape[1]
    in_sp = x.shape[2:]
    out_sp = transposed_output_shape(in_sp, kernel, stride)

    xf = np.moveaxis(x.data, 1, -1).reshape(-1, c_in)
    wf = weight.data.reshape(c_in, -1)
    cols = (xf @ wf).reshape(n, *in_sp, c_out, *kernel)
    out = _col2im(cols, (n, c_out, *out_sp), kernel, stride, in_sp)
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"transposed_conv: bias shape {bias.shape} vs {c_out} channels")
        out += bias.data.reshape((1, c_out) + (1,) * nd)
        inputs.append(bias)

    def backward(g):
        gcols = _im2col(g, kernel, stride, in_sp).reshape(xf.shape[0], -1)
        gx = np.ascontiguousarray(np.moveaxis((gcols @ wf.T).reshape(n, *in_sp, c_in), -1, 1))
        gw = (xf.T @ gcols).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        return grads

    return record("transposed_conv", out, inputs, backward)

