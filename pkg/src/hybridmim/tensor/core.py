"""Tensor type and the reverse-mode differentiation tape.

A :class:`Tape` records every differentiable primitive executed while it is
active. Tensors are thin wrappers around contiguous numpy arrays; gradients
are plain numpy arrays of the same shape as the value.

Only one tape can be active per thread. Nested ``with Tape()`` blocks are
allowed; the innermost one records.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericError, TapeError

_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def is_checked() -> bool:
    return getattr(_state, "checked", False)


def current_tape() -> Optional["Tape"]:
    tapes = _stack()
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    ``precision(np.float64)`` is the 64-bit mode used for gradient checks.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise :class:`NumericError` as soon as a forward op yields NaN/Inf."""
    prev = is_checked()
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


class Tensor:
    """Dense n-d array with optional gradient tracking."""

    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, _raw: bool = False):
        if _raw:
            arr = data
        else:
            if isinstance(data, Tensor):
                data = data.data
            arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
            if arr.ndim and 0 in arr.shape:
                raise ContractError(f"tensor shape entries must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["Node"] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, _raw=True)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the tape that produced it."""
        if self._node is None:
            raise TapeError("tensor was not produced on a tape; call tape.backward() instead")
        self._node.tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    name: str
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape: "Tape"


class Tape:
    """Ordered record of executed primitives.

    Usage::

        with Tape() as tape:
            loss = f(params)
        grads = tape.backward(loss, wrt=params)

    A tape can be consumed by exactly one backward pass; a second call
    raises :class:`TapeError` instead of silently double-accumulating.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._used = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _stack()
        if tapes and tapes[-1] is self:
            tapes.pop()
        else:  # pragma: no cover - unbalanced use
            tapes.remove(self)

    def record(self, name, out, parents, backward) -> None:
        node = Node(name, out, tuple(parents), backward, self)
        out._node = node
        for p in node.parents:
            if p.requires_grad and p._node is None:
                self._leaves[id(p)] = p
        self.nodes.append(node)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def backward(self, output: Tensor, wrt: Optional[Sequence[Tensor]] = None):
        """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf.

        Returns a list aligned with ``wrt`` when given, else a dict keyed by
        ``id(leaf)``. Leaves not on any path to ``output`` get zeros.
        """
        if self._used:
            raise TapeError("backward already ran on this tape; create a new Tape")
        if output.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        if output._node is not None and output._node.tape is not self:
            raise TapeError("output was produced on a different tape")
        self._used = True

        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        if output.requires_grad and output._node is None:
            self._leaves.setdefault(id(output), output)

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(pg, p.shape)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        result = {}
        targets = list(self._leaves.values())
        if wrt is not None:
            targets += [t for t in wrt if id(t) not in self._leaves]
        for leaf in targets:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            else:
                g = np.array(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[id(leaf)] = g

        for node in self.nodes:  # release saved activations
            node.parents = ()
            node.backward = None
        self.nodes.clear()
        if wrt is not None:
            return [result[id(t)] for t in wrt]
        return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def make_output(name: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the result of primitive ``name`` and record it if needed."""
    if is_checked() and not np.all(np.isfinite(data)):
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor(data, _raw=True)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(name, out, parents, backward)
    return out
