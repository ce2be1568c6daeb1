"""Desk-scale experiment drivers built on the pre-train and fine-tune loops.

Every driver takes a :class:`ToyProtocol` that pins data, model size and
budgets. Pre-trained checkpoints are cached under ``cache_dir`` by
(config name, seed), so experiments that share a configuration reuse the
same weights.
"""

from __future__ import annotations

import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .data import BatchSource, PhantomSpec, make_corpus
from .finetune import FinetuneConfig, finetune_run
from .losses import LossWeights
from .masking import GridSpec
from .model import HybridUNet
from .pretrain import PretrainConfig, TrainState, checkpoint_name, pretrain_step, read_metrics, run_pretrain

log = logging.getLogger(__name__)

# Loss groups added in order; each entry keeps everything before it.
ABLATION = (
    ("PR", LossWeights(num=0.0, loc=0.0, con=0.0, cl=0.0)),
    ("+Num", LossWeights(num=0.1, loc=0.0, con=0.0, cl=0.0)),
    ("+Loc", LossWeights(num=0.1, loc=0.1, con=0.0, cl=0.0)),
    ("+Con", LossWeights(num=0.1, loc=0.1, con=0.01, cl=0.0)),
    ("+CL", LossWeights()),
)

LABEL_FRACTIONS = (0.1, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class ToyProtocol:
    volume: int = 32
    sub_volume: int = 16
    patch: int = 8
    model: dict = field(default_factory=lambda: {"base_width": 4, "max_width": 32, "projection_dim": 16})
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_pretrain: int = 32
    pretrain_data_seed: int = 0
    pretrain_steps: int = 200
    pretrain_lr: float = 1e-3
    warmup_steps: int = 10
    n_train: int = 10
    n_val: int = 8
    finetune_data_seed: int = 1234
    epochs: int = 12
    finetune_lr: float = 3e-3
    seeds: tuple = (0, 1, 2)
    cache_dir: Optional[Path] = None

    def __post_init__(self):
        shape = (self.volume,) * 3
        self.phantom = dataclasses.replace(self.phantom, volume_shape=shape)
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)

    def grid(self, sub_volume: Optional[int] = None, patch: Optional[int] = None) -> GridSpec:
        return GridSpec((self.volume,) * 3, sub_volume or self.sub_volume, patch or self.patch)

    def pretrain_volumes(self) -> list:
        return [v for v, _ in make_corpus(self.n_pretrain, self.phantom, self.pretrain_data_seed)]

    def finetune_split(self) -> tuple[list, list]:
        data = make_corpus(self.n_train + self.n_val, self.phantom, self.finetune_data_seed)
        return data[:self.n_train], data[self.n_train:]

    def pretrain_config(self, seed: int, weights: Optional[LossWeights] = None, target_cube=None,
                        grid: Optional[GridSpec] = None, steps: Optional[int] = None) -> PretrainConfig:
        steps = steps or self.pretrain_steps
        return PretrainConfig(
            grid or self.grid(), weights=weights or LossWeights(), target_cube=target_cube,
            optim={"lr_init": self.pretrain_lr, "warmup_steps": min(self.warmup_steps, steps - 1)},
            total_steps=steps, seed=seed, model=dict(self.model))

    def finetune_config(self, seed: int, init: str = "scratch", label_fraction: float = 1.0,
                        steps_per_epoch: Optional[int] = None, grid: Optional[GridSpec] = None) -> FinetuneConfig:
        return FinetuneConfig(
            grid or self.grid(), init=init, epochs=self.epochs, optim={"lr_init": self.finetune_lr},
            label_fraction=label_fraction, seed=seed, model=dict(self.model), steps_per_epoch=steps_per_epoch)


class Runner:
    """Holds the protocol's datasets and the checkpoint cache for one session."""

    def __init__(self, protocol: ToyProtocol):
        self.p = protocol
        self._volumes = None
        self._split = None
        self._memory: dict = {}

    @property
    def volumes(self) -> list:
        if self._volumes is None:
            self._volumes = self.p.pretrain_volumes()
        return self._volumes

    @property
    def split(self) -> tuple[list, list]:
        if self._split is None:
            self._split = self.p.finetune_split()
        return self._split

    def pretrained(self, name: str, seed: int, cfg: PretrainConfig) -> str:
        """Checkpoint path for ``cfg``, training it unless cached."""
        key = (name, seed)
        if key in self._memory:
            return self._memory[key]
        if self.p.cache_dir is None:
            raise ValueError("pre-training needs protocol.cache_dir")
        out = self.p.cache_dir / f"{name}_s{seed}"
        ckpt = out / checkpoint_name(cfg.total_steps)
        if not ckpt.exists():
            t0 = time.perf_counter()
            run_pretrain(cfg, self.volumes, out)
            log.info("pre-trained %s seed %d in %.0fs", name, seed, time.perf_counter() - t0)
        self._memory[key] = str(ckpt)
        return str(ckpt)

    def finetune_dice(self, cfg: FinetuneConfig) -> float:
        train, val = self.split
        return finetune_run(cfg, train, val).best.mean_dice


def _mean(xs) -> float:
    return float(statistics.fmean(xs))


def transfer_experiment(runner: Runner) -> dict:
    """Best validation mean Dice per seed for scratch and pre-trained init."""
    p = runner.p
    out = {"scratch": [], "pretrained": []}
    for seed in p.seeds:
        ckpt = runner.pretrained("full", seed, p.pretrain_config(seed))
        out["scratch"].append(runner.finetune_dice(p.finetune_config(seed)))
        out["pretrained"].append(runner.finetune_dice(p.finetune_config(seed, ckpt)))
    return out


def ablation_experiment(runner: Runner, variants=ABLATION) -> list[tuple[str, list]]:
    """Downstream Dice per seed for each cumulative loss configuration."""
    p = runner.p
    rows = []
    for name, weights in variants:
        tag = "full" if weights == LossWeights() else "abl_" + name.strip("+").lower()
        scores = []
        for seed in p.seeds:
            ckpt = runner.pretrained(tag, seed, p.pretrain_config(seed, weights))
            scores.append(runner.finetune_dice(p.finetune_config(seed, ckpt)))
        rows.append((name, scores))
    return rows


def ablation_trend(means: Sequence[float], tolerance: float = 0.005) -> tuple[bool, list]:
    """Nondecreasing up to single-step drops of at most ``tolerance``, and
    the last configuration no worse than the first."""
    steps = [b - a for a, b in zip(means, means[1:])]
    ok = all(d >= -tolerance for d in steps) and means[-1] >= means[0]
    return ok, steps


def label_sweep(runner: Runner, fractions: Sequence[float] = LABEL_FRACTIONS,
                inits: Sequence[str] = ("scratch", "pretrained")) -> dict:
    """Dice per seed at each label fraction.

    ``steps_per_epoch`` is pinned to the full-split value so every fraction
    gets the same number of updates.
    """
    p = runner.p
    spe = -(-p.n_train // FinetuneConfig.batch_size)
    out = {}
    for init in inits:
        for frac in fractions:
            scores = []
            for seed in p.seeds:
                src = "scratch"
                if init == "pretrained":
                    src = runner.pretrained("full", seed, p.pretrain_config(seed))
                cfg = p.finetune_config(seed, src, label_fraction=frac, steps_per_epoch=spe)
                scores.append(runner.finetune_dice(cfg))
            out[(init, frac)] = scores
    return out


def timing_experiment(protocol: ToyProtocol, steps: int = 50, sub_volume: int = 8,
                      cubes: Sequence[int] = (16, 32), seed: int = 0) -> dict:
    """Mean pre-train step time (ms) per target cube.

    Configurations take turns step by step so slow drift in machine load
    hits all of them alike. Batches are prepared up front, so the timings
    cover forward, backward and update only.
    """
    grid = protocol.grid(sub_volume, sub_volume // 2)
    cfgs = {c: protocol.pretrain_config(seed, target_cube=c, grid=grid, steps=steps) for c in cubes}
    states = {c: TrainState(HybridUNet(cfgs[c].model_config(), seed=seed)) for c in cubes}
    regions = {c: cfgs[c].region() for c in cubes}
    source = BatchSource(protocol.pretrain_volumes(), cfgs[cubes[0]].batch_size, seed, crop=grid.volume_shape)
    times = {c: [] for c in cubes}
    for step in range(steps):
        batch = source.batch(step)
        for c in cubes:
            times[c].append(pretrain_step(batch, states[c], cfgs[c], regions[c]).step_ms)
    return {c: _mean(v) for c, v in times.items()}


def setting_sweep(runner: Runner, settings: Sequence[tuple[int, int, int]], seeds: Optional[Sequence[int]] = None,
                  steps: Optional[int] = None) -> list[dict]:
    """Pre-train and fine-tune over (sub-volume, patch, region) settings.

    Each row holds the setting, mean step time and mean downstream Dice.
    """
    p = runner.p
    rows = []
    for s1, s2, cube in settings:
        grid = p.grid(s1, s2)
        dices, ms = [], []
        for seed in seeds if seeds is not None else p.seeds:
            cfg = p.pretrain_config(seed, target_cube=cube, grid=grid, steps=steps)
            ckpt = runner.pretrained(f"set_{s1}_{s2}_{cube}_{cfg.total_steps}", seed, cfg)
            ms.append(_step_ms(Path(ckpt).parent / "metrics.csv"))
            dices.append(runner.finetune_dice(p.finetune_config(seed, ckpt, grid=grid)))
        rows.append({"sub_volume": s1, "patch": s2, "region": cube,
                     "step_ms": _mean(ms), "dice": _mean(dices), "dice_per_seed": dices})
    return rows


def _step_ms(csv_path: Path) -> float:
    return _mean(float(r["step_ms"]) for r in read_metrics(csv_path))


def seed_means(scores: dict) -> dict:
    return {k: _mean(v) for k, v in scores.items()}


__all__ = ["ABLATION", "LABEL_FRACTIONS", "ToyProtocol", "Runner", "transfer_experiment", "ablation_experiment",
           "ablation_trend", "label_sweep", "timing_experiment", "setting_sweep", "seed_means"]
