"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new Tensor; backward closures return one gradient per parent, with
broadcasting undone by the tape.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .core import Tensor, as_tensor, make_output

# -- elementwise arithmetic -------------------------------------------------


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_output("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_output("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_output("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_output("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_output("neg", -a.data, (a,), lambda g: (-g,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    b = as_tensor(b)
    return _const(a, b), b


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_output("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_output("exp", out, (a,), lambda g: (g * out,))


def log(a, eps: float | None = None) -> Tensor:
    """Natural log; with ``eps`` the argument is clamped below at ``eps``.

    Clamped coordinates receive zero gradient.
    """
    a = as_tensor(a)
    x = a.data
    if eps is None:
        return make_output("log", np.log(x), (a,), lambda g: (g / x,))
    safe = np.maximum(x, eps)
    live = x > eps
    return make_output("log", np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def sqrt(a) -> Tensor:
    """Square root whose gradient at exactly zero is taken to be zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        pos = out > 0
        return (np.where(pos, g * 0.5 / np.where(pos, out, 1.0), 0.0),)

    return make_output("sqrt", out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_output("relu", a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_output("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over the three trailing axes."""
    x = as_tensor(x)
    axes = (-3, -2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.mean(axis=axes, keepdims=True)),)

    return make_output("instance_norm", xhat, (x,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_output("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_output("log_softmax", out, (a,), backward)


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    out = np.where(cond, a.data, b.data)
    return make_output("where", out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# -- reductions and shape ---------------------------------------------------


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_output("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_output("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_output("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    advanced = _is_advanced(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_output("getitem", np.array(out), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return make_output("concat", out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, _insert(t.shape, axis)) for t in tensors], axis=axis)


def _insert(shape, axis):
    shape = list(shape)
    shape.insert(axis % (len(shape) + 1), 1)
    return tuple(shape)


# -- linear algebra and layers ----------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return make_output("matmul", out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (..., in) and weight (out, in).

    A 1-d ``x`` is treated as a single row (matrix-vector product).
    """
    x = as_tensor(x)
    vec = x.ndim == 1
    if vec:
        x = reshape(x, (1, x.shape[0]))
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects {weight.shape[1]} inputs, got {x.shape[-1]}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    if vec:
        out = reshape(out, (weight.shape[0],))
    return out


def global_avg_pool(x) -> Tensor:
    """Mean over the three trailing spatial axes: (N,C,H,W,D) -> (N,C)."""
    x = as_tensor(x)
    if x.ndim < 4:
        raise DimensionError(f"global_avg_pool needs (C,H,W,D) or (N,C,H,W,D), got {x.shape}")
    return mean(x, axis=(-3, -2, -1))


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: Bernoulli keep-mask scaled by 1/keep-prob.

    Identity when ``training`` is false or ``rate`` is 0.
    """
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    if rng is None:
        rng = np.random.default_rng()
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return make_output("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        # projection removes the radial component; rows clamped at eps are plain scaling
        radial = (g * out).sum(axis=axis, keepdims=True)
        proj = (g - out * radial) / denom
        return (np.where(norm > eps, proj, g / denom),)

    return make_output("l2_normalize", out, (x,), backward)
