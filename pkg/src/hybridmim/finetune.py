"""Segmentation fine-tuning, Dice and HD95."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import tensor as T
from .data import AugmentConfig, augment_finetune
from .errors import ConfigError, DimensionError, MetricUndefinedError
from .masking import GridSpec
from .model import HybridUNet, ModelConfig, load_checkpoint, replace_head
from .optim import AdamWState, OptimConfig, adamw_step, lr_at
from .pretrain import MODEL_KEYS


# -- metrics ----------------------------------------------------------------

def dice(pred, truth) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(truth, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face neighbour outside the mask
    (the volume border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def surface_distances(pred, truth, spacing=None) -> np.ndarray:
    """Distances from each surface voxel of either mask to the other surface."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(truth, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise MetricUndefinedError("surface distance needs two nonempty masks")
    spacing = (1.0,) * a.ndim if spacing is None else tuple(float(s) for s in spacing)
    sa, sb = surface(a), surface(b)
    to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    return np.concatenate([to_b[sa], to_a[sb]])


def hd95(pred, truth, spacing=None) -> float:
    """95th percentile (linear interpolation) of the symmetric surface distances."""
    return float(np.percentile(surface_distances(pred, truth, spacing), 95))


@dataclass
class SegMetrics:
    dice: list  # per foreground class
    hd95: list  # per foreground class, NaN when undefined
    classes: list = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def mean_hd95(self) -> float:
        vals = [v for v in self.hd95 if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        clean = lambda v: None if math.isnan(v) else v
        return {"classes": list(self.classes), "dice": list(self.dice),
                "hd95": [clean(v) for v in self.hd95], "mean_dice": self.mean_dice,
                "mean_hd95": clean(self.mean_hd95)}


def foreground_classes(c: int) -> list:
    return list(range(1, c)) if c > 1 else [0]


def evaluate_masks(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], c: int) -> SegMetrics:
    """Per-class Dice and HD95 averaged over samples; HD95 skips undefined cases."""
    classes = foreground_classes(c)
    dices, hds = [], []
    for k in classes:
        ds, hs = [], []
        for p, t in zip(preds, truths):
            ds.append(dice(p == k, t == k))
            try:
                hs.append(hd95(p == k, t == k))
            except MetricUndefinedError:
                pass
        dices.append(float(np.mean(ds)))
        hds.append(float(np.mean(hs)) if hs else float("nan"))
    return SegMetrics(dices, hds, classes)


# -- loss ----------------------------------------------------------------------

def one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    """(N, H, W, D) integer labels -> (N, c, H, W, D) float32."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"label values must lie in [0, {c}), found [{labels.min()}, {labels.max()}]")
    return np.moveaxis(np.eye(c, dtype=np.float32)[labels], -1, 1)


def soft_dice_loss(probs: T.Tensor, target: np.ndarray) -> T.Tensor:
    """``1 - mean over (sample, class) of 2 sum(p y) / (sum p + sum y)``.

    A (sample, class) pair with empty prediction and target scores 1, which
    makes the loss equal ``1 - dice`` at one-hot predictions.
    """
    axes = (2, 3, 4)
    inter = T.sum(probs * target, axis=axes)
    denom = T.sum(probs, axis=axes) + target.sum(axis=axes)
    empty = denom.data == 0
    ratio = T.where(empty, np.ones_like(denom.data), (inter * 2.0) / T.where(empty, np.ones_like(denom.data), denom))
    return 1.0 - T.mean(ratio)


def segmentation_loss(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Voxel-mean cross-entropy plus soft Dice, equally weighted."""
    c = logits.shape[1]
    target = one_hot(labels, c).astype(logits.dtype)
    ce = -T.mean(T.sum(T.log_softmax(logits, axis=1) * target, axis=1))
    return ce + soft_dice_loss(T.softmax(logits, axis=1), target)


# -- run --------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    grid: GridSpec
    init: str = "scratch"  # or a checkpoint path
    classes: int = 3  # including background
    epochs: int = 10
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr_init=1e-3, total_steps=1))
    augment: bool = True
    label_fraction: float = 1.0
    batch_size: int = 2
    seed: int = 0
    model: dict = field(default_factory=dict)
    # fixed batches per epoch (cycling through the subset); None means one pass
    steps_per_epoch: Optional[int] = None
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**{"total_steps": 1, **self.optim})
        if isinstance(self.augment_cfg, dict):
            self.augment_cfg = AugmentConfig(**self.augment_cfg)
        if self.classes < 1:
            raise ConfigError("classes must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model option(s): {sorted(unknown)}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.grid, **self.model)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"]["volume_shape"] = list(self.grid.volume_shape)
        return d


def label_subset(n_train: int, fraction: float, seed: int) -> np.ndarray:
    """Leading ``max(1, round(fraction * n))`` entries of a seeded permutation."""
    if n_train < 1:
        raise ConfigError("training split is empty")
    perm = np.random.default_rng([seed, 0x5E1EC7]).permutation(n_train)
    k = max(1, int(math.floor(fraction * n_train + 0.5)))
    return perm[:k]


def build_segmenter(cfg: FinetuneConfig, init_model: Optional[HybridUNet] = None) -> HybridUNet:
    """Pre-trained (checkpoint or in-memory) or freshly initialized network with a c-way head."""
    if init_model is not None:
        base = init_model
    elif cfg.init == "scratch":
        base = HybridUNet(cfg.model_config(), seed=cfg.seed)
    else:
        base = load_checkpoint(cfg.init, cfg.model_config()).model
    if base.head_kind == "segment" and base.classes == cfg.classes:
        return copy.deepcopy(base)
    return replace_head(base, cfg.classes, seed=cfg.seed)


def predict(model: HybridUNet, volumes: Sequence[np.ndarray]) -> list[np.ndarray]:
    out = []
    for v in volumes:
        logits = model.forward_segment(np.asarray(v, dtype=np.float32), training=False)
        out.append(np.argmax(logits.data, axis=0).astype(np.uint8))
    return out


@dataclass
class FinetuneResult:
    best: SegMetrics
    best_epoch: int
    curves: list  # dicts, one per epoch
    model: HybridUNet
    train_indices: np.ndarray


def finetune_run(cfg: FinetuneConfig, train_set: Sequence[tuple], val_set: Sequence[tuple],
                 out_dir: Union[str, Path, None] = None,
                 init_model: Optional[HybridUNet] = None) -> FinetuneResult:
    """Train on ``train_set`` ((volume, labels) pairs) and keep the epoch with
    the best validation mean Dice. With ``epochs == 0`` the initial network
    is evaluated."""
    if not val_set:
        raise ConfigError("validation split is empty")
    model = build_segmenter(cfg, init_model)
    subset = label_subset(len(train_set), cfg.label_fraction, cfg.seed)
    n_batches = cfg.steps_per_epoch or math.ceil(len(subset) / cfg.batch_size)
    total = max(1, cfg.epochs * n_batches)
    optim_cfg = OptimConfig(**{**dataclasses.asdict(cfg.optim), "total_steps": total,
                               "warmup_steps": min(cfg.optim.warmup_steps, total - 1)})
    state = AdamWState()
    val_x = [v for v, _ in val_set]
    val_y = [y for _, y in val_set]

    curves = []
    best, best_epoch = None, 0
    if cfg.epochs == 0:
        best = evaluate_masks(predict(model, val_x), val_y, cfg.classes)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch, 0x0DE7]).permutation(subset)
        losses = []
        for b in range(n_batches):
            if cfg.steps_per_epoch is None:
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            else:
                idx = order[np.arange(b * cfg.batch_size, (b + 1) * cfg.batch_size) % len(order)]
            xs, ys = [], []
            for j, i in enumerate(idx):
                x, y = train_set[i]
                if cfg.augment:
                    x, y = augment_finetune(x, y, [cfg.seed, epoch, b, j], cfg.augment_cfg)
                xs.append(np.asarray(x, dtype=np.float32))
                ys.append(np.asarray(y))
            named = model.named_parameters()
            model.zero_grad()
            with T.Tape() as tape:
                logits = model.forward_segment(np.stack(xs), training=True, seed=[cfg.seed, step, 0xF7])
                loss = segmentation_loss(logits, np.stack(ys))
            grads = tape.backward(loss, wrt=[p for _, p in named])
            adamw_step(named, {n: g for (n, _), g in zip(named, grads)}, state, lr_at(step, optim_cfg), optim_cfg)
            losses.append(loss.item())
            step += 1
        metrics = evaluate_masks(predict(model, val_x), val_y, cfg.classes)
        curves.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "metrics": metrics})
        if best is None or metrics.mean_dice > best.mean_dice:
            best, best_epoch = metrics, epoch

    if out_dir is not None:
        write_outputs(out_dir, cfg, curves, best, best_epoch)
    return FinetuneResult(best, best_epoch, curves, model, subset)


def write_outputs(out_dir: Union[str, Path], cfg: FinetuneConfig, curves: list, best: SegMetrics,
                  best_epoch: int) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = foreground_classes(cfg.classes)
    curves_path = out_dir / "curves.csv"
    with open(curves_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss"] + [f"val_dice_{k}" for k in classes]
                        + [f"val_hd95_{k}" for k in classes])
        for row in curves:
            m = row["metrics"]
            writer.writerow([row["epoch"], repr(row["train_loss"])] + [repr(v) for v in m.dice]
                            + [repr(v) for v in m.hd95])
    summary_path = out_dir / "summary.json"
    summary = {"best_epoch": best_epoch, **best.to_dict(), "init": cfg.init,
               "label_fraction": cfg.label_fraction, "seed": cfg.seed}
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return curves_path, summary_path
