"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericError
from .core import Tape, Tensor, precision


def _analytic(f, leaves: Sequence[Tensor]):
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        y = f()
    if y.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {y.shape}")
    return tape.backward(y, wrt=leaves)


def _value(f) -> float:
    v = f().item()
    if not np.isfinite(v):
        raise NumericError("function is non-finite at a perturbed point")
    return v


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    Runs in 64-bit mode on a float64 copy of ``x``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with precision(np.float64):
        leaf = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                      requires_grad=True)
        return grad_check_many(lambda: f(leaf), [leaf], eps=eps)


def grad_check_many(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-4,
                    max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Gradient check a closure over several leaves (e.g. model parameters).

    With ``max_coords`` only that many randomly chosen coordinates per leaf
    are perturbed; every leaf is still covered.
    """
    analytic = _analytic(f, leaves)
    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in _coords(flat.size, max_coords, rng):
            orig = flat[i]
            flat[i] = orig + eps
            up = _value(f)
            flat[i] = orig - eps
            down = _value(f)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


def _coords(n: int, max_coords, rng) -> Iterable[int]:
    if max_coords is None or n <= max_coords:
        return range(n)
    rng = rng or np.random.default_rng(0)
    return rng.choice(n, size=max_coords, replace=False)
