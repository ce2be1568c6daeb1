"""3D convolution and transposed convolution on channel-major volumes.

Layout is (N, C, H, W, D); a 4-d (C, H, W, D) input is treated as a batch
of one. Two forward paths exist for :func:`conv3d`: ``"direct"``
accumulates one kernel tap at a time, ``"im2col"`` gathers all taps through a
strided view and does a single tensordot. Both share the same backward.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError
from .core import Tensor, as_tensor, make_output
from .ops import add, reshape


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0), (p, p), (p, p), (p, p)])


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, Do, k, k, k) view, no copy
    v = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return v[:, :, ::stride, ::stride, ::stride]


def _taps(k: int):
    for a in range(k):
        for b in range(k):
            for c in range(k):
                yield a, b, c


def _batched(fn):
    def wrapper(x, weight, bias=None, stride=1, padding=0, **kw):
        x, weight = as_tensor(x), as_tensor(weight)
        bias = None if bias is None else as_tensor(bias)
        if x.ndim == 4:
            out = fn(reshape(x, (1,) + x.shape), weight, bias, stride, padding, **kw)
            return reshape(out, out.shape[1:])
        if x.ndim != 5:
            raise DimensionError(f"expected (C,H,W,D) or (N,C,H,W,D) input, got {x.shape}")
        return fn(x, weight, bias, stride, padding, **kw)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv3d(x: Tensor, weight: Tensor, bias=None, stride: int = 1, padding: int = 0,
           method: str = "im2col") -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W,D) with ``weight`` (Co,C,k,k,k).

    Output spatial size is ``(n + 2*padding - k) // stride + 1`` per axis.
    """
    n, c, *spatial = x.shape
    co, ci, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise DimensionError(f"only cubic kernels are supported, got {weight.shape}")
    if ci != c:
        raise DimensionError(f"input has {c} channels but kernel expects {ci}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if any(k > s + 2 * padding for s in spatial):
        raise ContractError(f"kernel {k} larger than padded input {spatial} (padding {padding})")
    outs = [_out_size(s, k, stride, padding) for s in spatial]

    xp = _pad(x.data, padding)
    w = weight.data
    if method == "im2col":
        cols = _windows(xp, k, stride)
        out = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    elif method == "direct":
        out = np.zeros((n, co, *outs), dtype=np.result_type(x.dtype, w.dtype))
        ho, wo, do = outs
        for a, b, cc in _taps(k):
            patch = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride, cc:cc + stride * do:stride]
            out += np.einsum("ncxyz,oc->noxyz", patch, w[:, :, a, b, cc])
    else:
        raise ValueError(f"unknown conv method {method!r}")

    def backward(g):
        cols = _windows(xp, k, stride)
        gw = np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if stride == 1:
            # input gradient is a full correlation with the flipped kernel
            gwin = _windows(_pad(g, k - 1), k, 1)
            wf = w[:, :, ::-1, ::-1, ::-1]
            gxp = np.tensordot(gwin, wf, axes=([1, 5, 6, 7], [0, 2, 3, 4])).transpose(0, 4, 1, 2, 3)
            gxp = np.ascontiguousarray(gxp)
            if padding:
                p = padding
                gxp = gxp[:, :, p:-p, p:-p, p:-p]
            return gxp, gw
        gcols = np.tensordot(g, w, axes=([1], [0]))  # (N, Ho, Wo, Do, C, k, k, k)
        gxp = np.zeros_like(xp)
        ho, wo, do = outs
        for a, b, cc in _taps(k):
            gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride, cc:cc + stride * do:stride] += \
                gcols[..., a, b, cc].transpose(0, 4, 1, 2, 3)
        if padding:
            p = padding
            gxp = gxp[:, :, p:-p, p:-p, p:-p]
        return gxp, gw

    y = make_output("conv3d", out, (x, weight), backward)
    if bias is not None:
        y = add(y, reshape(bias, (1, co, 1, 1, 1)))
    return y


@_batched
def conv_transpose3d(x: Tensor, weight: Tensor, bias=None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, k, k, k).

    Output size per axis is ``(n - 1) * stride - 2 * padding + k``; this is
    the adjoint of :func:`conv3d` with the same geometry.
    """
    n, c, *spatial = x.shape
    ci, co, k, _, _ = weight.shape
    if ci != c:
        raise DimensionError(f"input has {c} channels but kernel expects {ci}")
    h, wd, d = spatial
    full = [(s - 1) * stride + k for s in spatial]
    w = weight.data
    cols = np.tensordot(x.data, w, axes=([1], [0]))  # (N, H, W, D, Co, k, k, k)
    outp = np.zeros((n, co, *full), dtype=np.result_type(x.dtype, w.dtype))
    for a, b, cc in _taps(k):
        outp[:, :, a:a + stride * h:stride, b:b + stride * wd:stride, cc:cc + stride * d:stride] += \
            cols[..., a, b, cc].transpose(0, 4, 1, 2, 3)
    p = padding
    out = outp[:, :, p:full[0] - p, p:full[1] - p, p:full[2] - p] if p else outp

    def backward(g):
        gp = _pad(g, p)
        win = _windows(gp, k, stride)[:, :, :h, :wd, :d]  # (N, Co, H, W, D, k, k, k)
        gx = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4])).transpose(0, 4, 1, 2, 3)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        return np.ascontiguousarray(gx), gw

    y = make_output("conv_transpose3d", np.ascontiguousarray(out), (x, weight), backward)
    if bias is not None:
        y = add(y, reshape(bias, (1, co, 1, 1, 1)))
    return y


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the three trailing axes."""
    x = as_tensor(x)
    f = factor
    data = x.data
    for axis in (-3, -2, -1):
        data = np.repeat(data, f, axis=axis)

    def backward(g):
        s = g.shape
        g = g.reshape(s[:-3] + (s[-3] // f, f, s[-2] // f, f, s[-1] // f, f))
        return (g.sum(axis=(-5, -3, -1)),)

    return make_output("upsample_nearest", data, (x,), backward)
