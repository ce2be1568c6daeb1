"""Minimal module system on top of the tensor tape."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class; parameters and submodules are discovered from attributes
    in assignment order, so parameter names are stable across runs."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast parameters in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)


def _param(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng or np.random.default_rng()
        fan_in = cin * kernel ** 3
        self.weight = _param(rng, (cout, cin, kernel, kernel, kernel), math.sqrt(6.0 / fan_in))
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 2, stride: int = 2,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        # each output voxel receives cin * (kernel/stride)**3 taps
        fan_in = cin * max(1, (kernel // stride)) ** 3
        self.weight = _param(rng, (cin, cout, kernel, kernel, kernel), math.sqrt(6.0 / fan_in))
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose3d(x, self.weight, self.bias, self.stride)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        bound = 1.0 / math.sqrt(fin)
        self.weight = _param(rng, (fout, fin), bound)
        self.bias = _param(rng, (fout,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class InstanceNorm3d(Module):
    """Per-(sample, channel) normalization with a learned affine map.

    A 1x1x1 input has no spatial statistics, so only the affine part applies.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        if np.prod(x.shape[2:]) > 1:
            x = T.instance_norm(x, self.eps)
        return x * T.reshape(self.weight, (1, c, 1, 1, 1)) + T.reshape(self.bias, (1, c, 1, 1, 1))
