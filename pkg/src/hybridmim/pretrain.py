"""Self-supervised pre-training loop.

Each step masks every sample with a fresh plan, runs two dropout-active
encoder passes (one when the contrastive weight is zero), evaluates the
five objectives, backpropagates the weighted total and applies one AdamW
update. All randomness is derived from
``(seed, step)``, so a run resumed from a checkpoint retraces the
uninterrupted run.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import losses as L
from . import tensor as T
from .data import BatchSource, Prefetcher
from .errors import CheckpointError, ConfigError, DimensionError
from .masking import GridSpec, TargetRegion, apply_mask, make_plan, select_target_region
from .model import HybridUNet, ModelConfig, load_checkpoint, save_checkpoint
from .optim import AdamWState, OptimConfig, adamw_step, lr_at

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "loss_pr", "loss_num", "loss_loc", "loss_con", "loss_cl",
                  "loss_total", "l0_diag", "step_ms")
MODEL_KEYS = ("in_channels", "base_width", "depth", "dropout_rate", "projection_dim", "max_width", "norm")


@dataclass
class PretrainConfig:
    grid: GridSpec
    mask_ratio: float = 0.4
    target_cube: Optional[int] = None  # None reconstructs the full volume
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 2
    total_steps: int = 200
    seed: int = 0
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    mask_fill: float = 0.0
    model: dict = field(default_factory=dict)  # ModelConfig options except grid

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so the contrastive loss has negatives")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model option(s): {sorted(unknown)}")
        optim = self.optim if isinstance(self.optim, dict) else dataclasses.asdict(self.optim)
        optim = {**optim, "total_steps": self.total_steps}
        self.optim = OptimConfig(**optim)
        if self.target_cube is not None:
            select_target_region(self.grid, self.target_cube)  # validates the cube

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.grid, **self.model)

    def region(self) -> TargetRegion:
        cube = self.target_cube if self.target_cube is not None else min(self.grid.volume_shape)
        return select_target_region(self.grid, cube)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"]["volume_shape"] = list(self.grid.volume_shape)
        return d


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss_pr: float
    loss_num: float
    loss_loc: float
    loss_con: float
    loss_cl: float
    loss_total: float
    l0_diag: int
    step_ms: float

    def as_row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class TrainState:
    model: HybridUNet
    optim: AdamWState = field(default_factory=AdamWState)
    step: int = 0  # completed steps


def step_seeds(seed: int, step: int, n: int) -> tuple[list, list, list]:
    """(per-sample mask seeds, dropout seed of pass A, of pass B)."""
    return [[seed, step, i, 1] for i in range(n)], [seed, step, 2], [seed, step, 3]


def pair_features(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Interleave two (N, d) passes into (2N, d) with rows 2i, 2i+1 from sample i."""
    n, d = a.shape
    return T.stack([a, b], axis=1).reshape(2 * n, d)


def pretrain_step(batch: np.ndarray, state: TrainState, cfg: PretrainConfig,
                  region: Optional[TargetRegion] = None) -> StepMetrics:
    """One optimizer step on ``batch`` (N, C, H, W, D); advances ``state.step``."""
    batch = np.asarray(batch, dtype=np.float32)
    n = batch.shape[0]
    if batch.ndim != 5 or n != cfg.batch_size:
        raise DimensionError(f"expected a batch of {cfg.batch_size} volumes (N, C, H, W, D), got {batch.shape}")
    region = region or cfg.region()
    index = state.step
    lr = lr_at(index, cfg.optim)
    mask_seeds, seed_a, seed_b = step_seeds(cfg.seed, index, n)
    plans = [make_plan(cfg.grid, cfg.mask_ratio, s) for s in mask_seeds]
    masked = np.stack([apply_mask(batch[i], plans[i], cfg.mask_fill) for i in range(n)])
    count_labels = np.stack([p.count_labels for p in plans])
    loc_labels = np.stack([p.location_labels for p in plans])

    model = state.model
    named = model.named_parameters()
    model.zero_grad()
    t0 = time.perf_counter()
    with T.Tape() as tape:
        a = model.forward_pretrain(masked, training=True, seed=seed_a, region=region)
        u = a.num_probs
        w = cfg.weights
        pr = L.loss_pr(a.recon, batch, plans, region, w.pr_masked_only, w.pr_reduction)
        num = L.loss_num(u, count_labels)
        loc = L.loss_loc(a.loc_probs, loc_labels)
        con = L.loss_con(u, a.loc_probs)
        if w.cl:
            b = model.forward_pretrain(masked, training=True, seed=seed_b, decode=False)
            cl = L.loss_cl(pair_features(a.feature, b.feature), w.temperature, w.cl_exclude_positive)
        else:
            cl = 0.0  # second pass only feeds the contrastive term
        report = L.loss_total(pr, num, loc, con, cl, w, L.l0_diagnostic(a.loc_probs, loc_labels))
    grads = {}
    if named:
        params = [p for _, p in named]
        out = report.total_tensor if report.total_tensor is not None else T.Tensor(0.0)
        values = tape.backward(out, wrt=params)
        grads = {name: g for (name, _), g in zip(named, values)}
    adamw_step(named, grads, state.optim, lr, cfg.optim)
    step_ms = (time.perf_counter() - t0) * 1000.0
    state.step += 1
    return StepMetrics(state.step, lr, report.pr, report.num, report.loc, report.con, report.cl,
                       report.total, report.l0_diagnostic, max(step_ms, 1e-6))


# -- checkpoints ---------------------------------------------------------------

def save_state(path: Union[str, Path], state: TrainState, cfg: PretrainConfig) -> Path:
    meta = {"step": state.step, "optim_t": state.optim.t, "pretrain_config": cfg.to_dict()}
    return save_checkpoint(path, state.model, state.optim.to_arrays(), meta)


def load_state(path: Union[str, Path], cfg: Optional[PretrainConfig] = None) -> TrainState:
    ckpt = load_checkpoint(path, cfg.model_config() if cfg is not None else None)
    if "step" not in ckpt.meta:
        raise CheckpointError(f"{path} holds no training state (missing step)")
    optim = AdamWState.from_arrays(ckpt.meta.get("optim_t", 0), ckpt.arrays)
    return TrainState(ckpt.model, optim, int(ckpt.meta["step"]))


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.hmck"


# -- metrics CSV ----------------------------------------------------------------

def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def format_rows(rows: Sequence[StepMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for m in rows:
        writer.writerow([_fmt(v) for v in m.as_row()])
    return buf.getvalue()


def read_metrics(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def _prepare_csv(path: Path, keep_through: int) -> None:
    """Start a fresh CSV, or on resume keep only rows up to ``keep_through``."""
    header = ",".join(METRIC_COLUMNS) + "\n"
    if keep_through == 0 or not path.exists():
        path.write_text(header)
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = [ln for ln in lines[1:] if ln.strip() and int(ln.split(",", 1)[0]) <= keep_through]
    path.write_text(header + "".join(kept))


# -- driver ---------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Path
    metrics_csv: Path
    metrics: list
    state: TrainState


def run_pretrain(cfg: PretrainConfig, volumes: Union[Sequence[np.ndarray], BatchSource],
                 out_dir: Union[str, Path], resume_from: Union[str, Path, None] = None,
                 stop_after: Optional[int] = None,
                 on_step: Optional[Callable[[StepMetrics], None]] = None) -> PretrainResult:
    """Train for ``cfg.total_steps`` steps writing ``metrics.csv`` and checkpoints
    into ``out_dir``. ``stop_after`` ends early (to exercise resume)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    source = volumes if isinstance(volumes, BatchSource) else BatchSource(
        list(volumes), cfg.batch_size, cfg.seed, crop=cfg.grid.volume_shape)

    if resume_from is not None:
        state = load_state(resume_from, cfg)
        log.info("resumed from %s at step %d", resume_from, state.step)
    else:
        state = TrainState(HybridUNet(cfg.model_config(), seed=cfg.seed))
    region = cfg.region()
    csv_path = out_dir / "metrics.csv"
    _prepare_csv(csv_path, state.step)

    last = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    metrics: list[StepMetrics] = []
    ckpt_path = None
    loader = Prefetcher(source.batch, state.step, last)
    try:
        with open(csv_path, "a", newline="") as fh:
            for step_index, batch in loader:
                assert step_index == state.step
                m = pretrain_step(batch, state, cfg, region)
                metrics.append(m)
                fh.write(format_rows([m]))
                fh.flush()
                if on_step is not None:
                    on_step(m)
                at_cadence = cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0
                if at_cadence or state.step == last:
                    ckpt_path = save_state(out_dir / checkpoint_name(state.step), state, cfg)
    finally:
        loader.close()
    if ckpt_path is None:  # nothing left to run
        ckpt_path = save_state(out_dir / checkpoint_name(state.step), state, cfg)
    return PretrainResult(ckpt_path, csv_path, metrics, state)
