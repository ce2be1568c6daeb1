"""Synthetic phantoms, crops, fine-tune augmentations and raw volume files.

Every generator here is a pure function of its seed. Raw volumes use a
small little-endian container::

    offset  size  field
    0       4     magic b"HMIM"
    4       2     version (u16)
    6       2     dtype code (u16): 1 = float32, 2 = uint8 labels
    8       16    channels, H, W, D (u32 each)
    24      ...   payload, C-order
"""

from __future__ import annotations

import csv
import dataclasses
import os
import queue
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, GenerationError

VOLUME_MAGIC = b"HMIM"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sHH4I")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2}


# -- phantoms -------------------------------------------------------------

@dataclass
class PhantomSpec:
    volume_shape: tuple = (32, 32, 32)
    n_objects: int = 2
    # per-class (lo, hi) intensity offset; None spreads classes over [0.4, 1.0]
    intensity_ranges: Optional[Sequence[tuple]] = None
    noise_sigma: float = 0.05
    seed: int = 0
    # nonzero so that zero-filled masked patches differ from background
    background: float = 0.5
    # random semi-axes are drawn from this range (voxels) unless semi_axes is given
    axis_range: tuple = (3.0, 8.0)
    semi_axes: Optional[Sequence[tuple]] = None
    # amplitude of a smooth low-frequency background field
    background_field: float = 0.1
    max_tries: int = 200

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        if self.n_objects < 1:
            raise ConfigError("n_objects must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.intensity_ranges is not None and len(self.intensity_ranges) != self.n_objects:
            raise ConfigError("intensity_ranges needs one (lo, hi) pair per object")
        if self.semi_axes is not None and len(self.semi_axes) != self.n_objects:
            raise ConfigError("semi_axes needs one triple per object")

    def class_ranges(self) -> list:
        if self.intensity_ranges is not None:
            return [tuple(r) for r in self.intensity_ranges]
        n = self.n_objects
        width = 0.6 / n
        return [(0.4 + i * width, 0.4 + (i + 0.8) * width) for i in range(n)]


def ellipsoid_mask(shape, center, semi_axes) -> np.ndarray:
    """Voxels whose centres satisfy ``sum(((i - c) / a)^2) <= 1``."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, a in zip(grids, center, semi_axes):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _smooth_field(shape, rng: np.random.Generator, n_waves: int = 3) -> np.ndarray:
    grids = np.meshgrid(*[np.linspace(0, 1, n) for n in shape], indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 1.5, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * sum(f * g for f, g in zip(freq, grids)) + phase)
    return out / n_waves


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(volume (1, H, W, D) float32, labels (H, W, D) uint8)``.

    Object ``i`` (1-based) is an axis-aligned ellipsoid labelled ``i``;
    objects never overlap and never touch the volume border.
    """
    rng = np.random.default_rng(spec.seed)
    shape = spec.volume_shape
    labels = np.zeros(shape, dtype=np.uint8)
    ranges = spec.class_ranges()
    image = np.full(shape, spec.background, dtype=np.float64)
    if spec.background_field:
        image += spec.background_field * _smooth_field(shape, rng)

    for obj in range(spec.n_objects):
        placed = False
        for _ in range(spec.max_tries):
            if spec.semi_axes is not None:
                axes = np.asarray(spec.semi_axes[obj], dtype=np.float64)
            else:
                axes = rng.uniform(*spec.axis_range, size=3)
            lo = np.ceil(axes)
            hi = np.array(shape) - 1 - np.ceil(axes)
            if np.any(hi < lo):
                continue
            center = rng.uniform(lo, hi)
            mask = ellipsoid_mask(shape, center, axes)
            if not mask.any() or (labels[mask] != 0).any():
                continue
            labels[mask] = obj + 1
            image[mask] += rng.uniform(*ranges[obj])
            placed = True
            break
        if not placed:
            raise GenerationError(f"could not place object {obj + 1} of {spec.n_objects} in "
                                  f"{shape} after {spec.max_tries} attempts")

    if spec.noise_sigma:
        image += rng.normal(0.0, spec.noise_sigma, size=shape)
    return image.astype(np.float32)[None], labels


def zscore(volume: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-channel zero-mean, unit-variance intensities."""
    v = np.asarray(volume, dtype=np.float32)
    axes = tuple(range(1, v.ndim)) if v.ndim == 4 else None
    mean = v.mean(axis=axes, keepdims=True)
    std = v.std(axis=axes, keepdims=True)
    return ((v - mean) / np.maximum(std, eps)).astype(np.float32)


def make_corpus(n: int, template: PhantomSpec, seed: int,
                normalize: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` phantoms sharing ``template`` with per-sample seeds drawn from
    ``seed``; ``normalize`` z-scores each image."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    out = []
    for s in seeds:
        img, lab = generate_phantom(dataclasses.replace(template, seed=int(s)))
        out.append((zscore(img) if normalize else img, lab))
    return out


# -- cropping and augmentation -------------------------------------------

def crop_origin(shape, size, seed) -> tuple:
    shape, size = tuple(shape), tuple(size)
    if len(size) != 3 or any(s < 1 or s > n for s, n in zip(size, shape)):
        raise ConfigError(f"crop size {size} does not fit volume {shape}")
    rng = np.random.default_rng(seed)
    return tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size))


def random_crop(x: np.ndarray, labels: Optional[np.ndarray], size, seed):
    """Crop the three trailing axes of ``x`` (and ``labels``) at one uniform origin."""
    x = np.asarray(x)
    if labels is not None and labels.shape[-3:] != x.shape[-3:]:
        raise DimensionError(f"labels {labels.shape} do not match volume {x.shape}")
    origin = crop_origin(x.shape[-3:], size, seed)
    sl = (Ellipsis,) + tuple(slice(o, o + s) for o, s in zip(origin, size))
    if labels is None:
        return x[sl].copy()
    return x[sl].copy(), labels[sl].copy()


@dataclass
class AugmentConfig:
    p_flip: float = 0.2
    p_rotate: float = 0.2
    p_scale: float = 0.1
    p_shift: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    shift_fraction: float = 0.1


@dataclass(frozen=True)
class AugmentPlan:
    flip_axis: Optional[int] = None
    rotate: Optional[tuple] = None  # (axis_a, axis_b, quarter_turns)
    scale: Optional[float] = None
    shift: Optional[float] = None  # as a fraction of the intensity range

    @property
    def is_identity(self) -> bool:
        return self.flip_axis is None and self.rotate is None and self.scale is None and self.shift is None


def plan_augment(seed, cfg: AugmentConfig = AugmentConfig()) -> AugmentPlan:
    rng = np.random.default_rng(seed)
    # draw every variate unconditionally so the stream layout is fixed
    u = rng.random(4)
    axis = int(rng.integers(0, 3))
    plane = [(0, 1), (0, 2), (1, 2)][int(rng.integers(0, 3))]
    turns = int(rng.integers(1, 4))
    scale = float(rng.uniform(*cfg.scale_range))
    shift = float(rng.uniform(-cfg.shift_fraction, cfg.shift_fraction))
    return AugmentPlan(
        flip_axis=axis if u[0] < cfg.p_flip else None,
        rotate=(plane[0], plane[1], turns) if u[1] < cfg.p_rotate else None,
        scale=scale if u[2] < cfg.p_scale else None,
        shift=shift if u[3] < cfg.p_shift else None,
    )


def apply_augment(x: np.ndarray, labels: Optional[np.ndarray], plan: AugmentPlan):
    """Apply ``plan`` to ``x`` (C, H, W, D); geometric ops also hit ``labels`` (H, W, D)."""
    x = np.asarray(x)
    lab = labels
    if plan.flip_axis is not None:
        x = np.flip(x, axis=plan.flip_axis + 1)
        if lab is not None:
            lab = np.flip(lab, axis=plan.flip_axis)
    if plan.rotate is not None:
        a, b, k = plan.rotate
        if x.shape[a + 1] != x.shape[b + 1]:
            k = 2  # half turns keep a non-square plane's shape
        x = np.rot90(x, k, axes=(a + 1, b + 1))
        if lab is not None:
            lab = np.rot90(lab, k, axes=(a, b))
    if plan.scale is not None or plan.shift is not None:
        span = float(x.max() - x.min())
        x = x.astype(np.float32, copy=True)
        if plan.scale is not None:
            x *= plan.scale
        if plan.shift is not None:
            x += plan.shift * span
    x = np.ascontiguousarray(x)
    if lab is None:
        return x
    return x, np.ascontiguousarray(lab)


def augment_finetune(x, labels, seed, cfg: AugmentConfig = AugmentConfig()):
    return apply_augment(x, labels, plan_augment(seed, cfg))


# -- raw volume files ----------------------------------------------------

def write_volume(path: Union[str, Path], v: np.ndarray) -> None:
    """Write a (C, H, W, D) or (H, W, D) float32 image or uint8 label volume."""
    v = np.asarray(v)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4:
        raise DimensionError(f"expected a 3-d or 4-d volume, got shape {v.shape}")
    code = _CODES.get(v.dtype)
    if code is None:
        raise FormatError(f"unsupported voxel dtype {v.dtype}; use float32 or uint8")
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, code, *v.shape)
    payload = np.ascontiguousarray(v, dtype=_DTYPES[code]).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(header + payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write volume {path}: {exc}") from exc


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("volume header truncated", offset=len(buf))
    magic, version, code, c, h, w, d = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"bad volume magic {magic!r}", offset=0)
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported volume version {version}", offset=4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=6)
    dt = _DTYPES[code]
    expected = c * h * w * d * dt.itemsize
    got = len(buf) - _HEADER.size
    if got != expected:
        raise FormatError(f"payload is {got} bytes, header implies {expected}",
                          offset=_HEADER.size + min(got, expected))
    arr = np.frombuffer(buf, dtype=dt, offset=_HEADER.size).reshape(c, h, w, d)
    return arr.astype(dt.newbyteorder("="), copy=True)


def read_volume(path: Union[str, Path]) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read volume {path}: {exc}") from exc
    try:
        return decode_volume(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.args[0]}", offset=exc.offset) from None


# -- manifest -------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    path: str
    split: str
    label_path: Optional[str] = None


def write_manifest(path: Union[str, Path], records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for r in records:
            writer.writerow([r.path, r.split] + ([r.label_path] if r.label_path else []))


def read_manifest(path: Union[str, Path]) -> list[ManifestRecord]:
    """One ``path,split[,label_path]`` record per line; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    base = path.parent
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) not in (2, 3) or row[1] not in ("train", "val"):
                raise FormatError(f"{path}: line {lineno} is not 'path,split[,label_path]' "
                                  f"with split train|val")
            resolve = lambda p: str(p if os.path.isabs(p) else base / p)
            out.append(ManifestRecord(resolve(row[0]), row[1], resolve(row[2]) if len(row) == 3 else None))
    return out


def write_corpus(directory: Union[str, Path], samples, val_count: int = 0,
                 with_labels: bool = True) -> Path:
    """Write samples as volume files plus ``manifest.csv``; the last
    ``val_count`` samples are tagged ``val``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, lab) in enumerate(samples):
        split = "val" if i >= len(samples) - val_count else "train"
        img_name = f"img_{i:04d}.hmim"
        write_volume(directory / img_name, img)
        lab_name = None
        if with_labels and lab is not None:
            lab_name = f"lab_{i:04d}.hmim"
            write_volume(directory / lab_name, lab.astype(np.uint8))
        records.append(ManifestRecord(img_name, split, lab_name))
    manifest = directory / "manifest.csv"
    write_manifest(manifest, records)
    return manifest


def load_split(manifest: Union[str, Path], split: str) -> list[tuple[np.ndarray, Optional[np.ndarray]]]:
    out = []
    for r in read_manifest(manifest):
        if r.split != split:
            continue
        lab = read_volume(r.label_path)[0] if r.label_path else None
        out.append((read_volume(r.path), lab))
    return out


# -- batches --------------------------------------------------------------

def batch_indices(n_items: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for ``step``; a pure function of (seed, step) so runs
    can resume mid-stream."""
    if n_items < 1:
        raise ConfigError("dataset is empty")
    rng = np.random.default_rng([seed, step, 0xDA7A])
    return rng.choice(n_items, size=batch_size, replace=n_items < batch_size)


@dataclass
class BatchSource:
    """Deterministic pre-training batches: volumes (N, C, H, W, D), cropped to
    ``crop`` when the stored volumes are larger."""
    volumes: list
    batch_size: int
    seed: int
    crop: Optional[tuple] = None

    def __post_init__(self):
        if not self.volumes:
            raise ConfigError("dataset is empty")

    def batch(self, step: int) -> np.ndarray:
        idx = batch_indices(len(self.volumes), self.batch_size, self.seed, step)
        out = []
        for j, i in enumerate(idx):
            v = np.asarray(self.volumes[i], dtype=np.float32)
            if self.crop is not None and tuple(v.shape[-3:]) != tuple(self.crop):
                v = random_crop(v, None, self.crop, [self.seed, step, j, 0xC0])
            out.append(v)
        return np.stack(out)


class Prefetcher:
    """Compute ``fn(step)`` for consecutive steps on a worker thread with a
    bounded queue. Output order always follows the step order, so results
    do not depend on timing."""

    def __init__(self, fn: Callable[[int], object], start: int, stop: int, depth: int = 2):
        self._q: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(fn, start, stop), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, fn, start, stop):
        for step in range(start, stop):
            if self._stop.is_set():
                return
            try:
                item = (step, fn(step), None)
            except BaseException as exc:  # surfaced on the consumer side
                item = (step, None, exc)
            if not self._put(item) or item[2] is not None:
                return
        self._put((None, None, None))

    def __iter__(self) -> Iterator[tuple[int, object]]:
        while True:
            step, value, exc = self._q.get()
            if exc is not None:
                raise exc
            if step is None:
                return
            yield step, value

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)
