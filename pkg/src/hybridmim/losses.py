"""Pre-training objectives and their weighted combination.

All losses accept either a single sample or a batch (leading axis N) and
average over the batch. Labels are plain numpy arrays; predictions are
:class:`~hybridmim.tensor.Tensor` so every loss is differentiable through
the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .masking import MaskPlan, TargetRegion
from .tensor import Tensor

EPS = 1e-12
_NEG = -1e30


@dataclass
class LossWeights:
    num: float = 0.1
    loc: float = 0.1
    con: float = 0.01
    cl: float = 0.1
    temperature: float = 0.5
    # variants kept behind flags
    cl_exclude_positive: bool = False
    pr_masked_only: bool = True
    pr_reduction: str = "norm"  # "norm" | "rms"

    def __post_init__(self):
        for name in ("num", "loc", "con", "cl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.pr_reduction not in ("norm", "rms"):
            raise ConfigError(f"pr_reduction must be 'norm' or 'rms', got {self.pr_reduction!r}")


@dataclass
class LossReport:
    pr: float
    num: float
    loc: float
    con: float
    cl: float
    total: float
    l0_diagnostic: int = 0
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict:
        return {"loss_pr": self.pr, "loss_num": self.num, "loss_loc": self.loc,
                "loss_con": self.con, "loss_cl": self.cl, "loss_total": self.total,
                "l0_diag": self.l0_diagnostic}


def _as_batch(plans) -> list:
    return [plans] if isinstance(plans, MaskPlan) else list(plans)


def loss_pr(recon: Tensor, original, plan: Union[MaskPlan, Sequence[MaskPlan]], region: TargetRegion,
            masked_only: bool = True, reduction: str = "norm") -> Tensor:
    """Partial-region reconstruction loss.

    Mean over target sub-volumes of the L2 norm of ``recon - original``
    restricted to masked voxels. ``recon`` may cover the whole volume or only
    the bounding box of ``region`` (what a partially decoded model emits).
    """
    if not region.selected_subvolumes:
        raise ConfigError("target region is empty")
    plans = _as_batch(plan)
    grid = plans[0].grid
    batched = recon.ndim == 5
    if not batched:
        recon = T.reshape(recon, (1,) + recon.shape)
    original = np.asarray(original.data if isinstance(original, Tensor) else original)
    if original.ndim == 4:
        original = original[None]
    if original.shape[0] != len(plans) or recon.shape[0] != len(plans):
        raise DimensionError(f"batch of {recon.shape[0]} predictions, {original.shape[0]} inputs "
                             f"and {len(plans)} plans")
    if original.shape[-3:] != grid.volume_shape:
        raise DimensionError(f"input shape {original.shape[-3:]} does not match grid {grid.volume_shape}")

    (h0, h1), (w0, w1), (d0, d1) = region.voxel_box()
    box = (slice(h0, h1), slice(w0, w1), slice(d0, d1))
    box_shape = (h1 - h0, w1 - w0, d1 - d0)
    if recon.shape[-3:] == grid.volume_shape and box_shape != grid.volume_shape:
        recon = recon[(slice(None), slice(None)) + box]
    elif recon.shape[-3:] != box_shape:
        raise DimensionError(f"reconstruction shape {recon.shape[-3:]} matches neither the volume "
                             f"{grid.volume_shape} nor the target box {box_shape}")
    if recon.shape[1] != original.shape[1]:
        raise DimensionError("reconstruction and input channel counts differ")

    target = original[(slice(None), slice(None)) + box].astype(recon.dtype)
    n, c = recon.shape[:2]
    if masked_only:
        mask = np.stack([p.voxel_mask()[box] for p in plans])[:, None].astype(recon.dtype)
    else:
        mask = np.ones((n, 1) + box_shape, dtype=recon.dtype)

    diff = (recon - target) * mask
    s1 = grid.sub_volume_size
    cells = [b // s1 for b in box_shape]
    sq = T.square(diff).reshape(n, c, cells[0], s1, cells[1], s1, cells[2], s1)
    per_cell = T.sum(sq, axis=(1, 3, 5, 7)).reshape(n, -1)
    if reduction == "rms":
        counts = (mask.reshape(n, 1, cells[0], s1, cells[1], s1, cells[2], s1).sum(axis=(1, 3, 5, 7)) * c)
        per_cell = per_cell / np.maximum(counts.reshape(n, -1), 1.0)
    elif reduction != "norm":
        raise ConfigError(f"unknown reduction {reduction!r}")

    # map selected global sub-volume ids into the box-local cell order
    lo = [b[0] for b in region.cell_box()]
    local = np.array([np.ravel_multi_index(tuple(i - l for i, l in zip(idx, lo)), cells)
                      for idx in zip(*np.unravel_index(list(region.selected_subvolumes), grid.grid_dims))])
    norms = T.sqrt(per_cell[:, local])
    return T.mean(norms)


def _check_distribution(u: Tensor) -> None:
    if T.core.is_checked():
        sums = u.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-5):
            raise ContractError("number probabilities do not sum to 1 along the last axis")


def loss_num(u: Tensor, labels) -> Tensor:
    """Cross-entropy between 9-way count probabilities and one-hot labels."""
    labels = np.asarray(labels)
    if u.shape != labels.shape or u.shape[-1] != 9:
        raise DimensionError(f"count probabilities {u.shape} vs labels {labels.shape}")
    _check_distribution(u)
    per_r = -T.sum(T.log(u, eps=EPS) * labels.astype(u.dtype), axis=-1)
    return T.mean(per_r)


def loss_loc(p: Tensor, labels) -> Tensor:
    """Binary cross-entropy summed over the 8 patches, averaged over sub-volumes."""
    labels = np.asarray(labels)
    if p.shape != labels.shape or p.shape[-1] != 8:
        raise DimensionError(f"location probabilities {p.shape} vs labels {labels.shape}")
    y = labels.astype(p.dtype)
    ll = T.log(p, eps=EPS) * y + T.log(1.0 - p, eps=EPS) * (1.0 - y)
    return -T.mean(T.sum(ll, axis=-1))


def l0_diagnostic(p, labels) -> int:
    """Number of patches whose thresholded location prediction is wrong."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    return int(((p > 0.5) != np.asarray(labels).astype(bool)).sum())


def loss_con(u: Tensor, p: Tensor) -> Tensor:
    """Consistency between count and location predictions.

    ``0.5 * sum_r [CE(u_r, #{p_r > 0.5}) + (sum_k p_r^k - argmax u_r)^2]``;
    the thresholded count and the argmax are constants, so the CE term only
    trains ``u`` and the squared term only trains ``p``.
    """
    if u.shape[:-1] != p.shape[:-1] or u.shape[-1] != 9 or p.shape[-1] != 8:
        raise DimensionError(f"count {u.shape} and location {p.shape} shapes disagree")
    lead = u.shape[:-1]
    n = 1 if len(lead) == 1 else lead[0]
    r = lead[-1]
    hard_count = (p.data > 0.5).sum(axis=-1).reshape(-1)
    argmax_u = u.data.argmax(axis=-1).astype(p.dtype)

    flat_u = T.reshape(u, (-1, 9))
    picked = flat_u[np.arange(flat_u.shape[0]), hard_count]
    ce = -T.log(picked, eps=EPS)
    se = T.square(T.sum(p, axis=-1).reshape(-1) - argmax_u.reshape(-1))
    per_sample = T.sum(T.reshape(ce + se, (n, r)), axis=1)
    return 0.5 * T.mean(per_sample)


def loss_cl(features: Tensor, temperature: float = 0.5, exclude_positive: bool = False) -> Tensor:
    """NT-Xent over 2N features where rows (2i, 2i+1) are a positive pair.

    The denominator sums over every ``k != i``; with ``exclude_positive`` it
    also drops the partner ``j``.
    """
    if features.ndim != 2 or features.shape[0] % 2:
        raise DimensionError(f"expected (2N, d) features, got {features.shape}")
    m = features.shape[0]
    if m < 4:
        raise ConfigError("contrastive loss needs N >= 2 samples (no negatives otherwise)")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    v = T.l2_normalize(features, axis=1)
    sim = T.matmul(v, T.transpose(v)) * (1.0 / temperature)
    idx = np.arange(m)
    partner = idx ^ 1
    keep = ~np.eye(m, dtype=bool)
    if exclude_positive:
        keep[idx, partner] = False
    masked = T.where(keep, sim, np.full((m, m), _NEG, dtype=sim.dtype))
    shift = np.max(np.where(keep, sim.data, -np.inf), axis=1, keepdims=True)
    lse = T.log(T.sum(T.exp(masked - shift), axis=1)) + shift.reshape(-1)
    positive = sim[idx, partner]
    return T.mean(lse - positive)


def loss_total(pr, num, loc, con, cl, weights: LossWeights, l0: int = 0) -> LossReport:
    """Weighted sum ``pr + w_num*num + w_loc*loc + w_con*con + w_cl*cl``."""
    parts = {"pr": pr, "num": num, "loc": loc, "con": con, "cl": cl}
    values = {name: comp.item() if isinstance(comp, Tensor) else float(comp) for name, comp in parts.items()}
    bad = [name for name, val in values.items() if not math.isfinite(val)]
    if bad:
        raise NumericError(f"non-finite loss component(s) {', '.join(bad)}; breakdown {values}")
    coef = {"pr": 1.0, "num": weights.num, "loc": weights.loc, "con": weights.con, "cl": weights.cl}
    total_tensor = None
    if any(isinstance(c, Tensor) for c in parts.values()):
        total_tensor = T.as_tensor(parts["pr"]) if isinstance(parts["pr"], Tensor) else None
        for name in ("num", "loc", "con", "cl"):
            comp = parts[name]
            if coef[name] == 0 or not isinstance(comp, Tensor):
                continue
            term = comp * coef[name]
            total_tensor = term if total_tensor is None else total_tensor + term
    total = sum(coef[k] * values[k] for k in values)
    if not math.isfinite(total):
        raise NumericError(f"total loss is not finite: {values}")
    return LossReport(total=total, l0_diagnostic=int(l0), total_tensor=total_tensor, **values)
