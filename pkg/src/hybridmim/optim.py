"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractError, NumericError, StateError


@dataclass
class OptimConfig:
    lr_init: float = 1e-4
    weight_decay: float = 1e-5
    warmup_steps: int = 0
    total_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    exempt_bias: bool = False

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ConfigError("lr_init must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got "
                              f"{self.warmup_steps} and {self.total_steps}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear ramp 0 -> lr_init over the warmup, cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_init * step / w
    frac = (step - w) / (cfg.total_steps - w)
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamWState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self, prefix: str = "optim") -> dict:
        out = {}
        for name in self.m:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, t: int, arrays: dict, prefix: str = "optim") -> "AdamWState":
        state = cls(t=int(t))
        for key, arr in arrays.items():
            if key.startswith(f"{prefix}/m/"):
                state.m[key[len(prefix) + 3:]] = np.array(arr)
            elif key.startswith(f"{prefix}/v/"):
                state.v[key[len(prefix) + 3:]] = np.array(arr)
        if set(state.m) != set(state.v):
            raise StateError("optimizer state has unmatched first/second moment buffers")
        return state


def _is_bias(name: str) -> bool:
    return name == "bias" or name.endswith(".bias")


def adamw_step(params: Iterable, grads: dict, state: AdamWState, lr: float, cfg: OptimConfig) -> AdamWState:
    """Update ``params`` (pairs of name, Tensor) in place.

    ``grads`` maps parameter name to gradient array; a missing entry counts as
    a zero gradient. Decay is applied as a separate ``-lr * wd * p`` term.
    """
    params = list(params)
    for name, _ in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.shape:
            raise StateError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise StateError(f"moment buffer for {name} has shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        decay = 0.0 if (cfg.exempt_bias and _is_bias(name)) else cfg.weight_decay
        p.data = (p.data - lr * decay * p.data - lr * update).astype(p.data.dtype)
    return state
