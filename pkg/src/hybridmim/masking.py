"""Two-level masking hierarchy.

A volume of shape (H, W, D) is tiled by cubic first-level sub-volumes of side
``s1``; each sub-volume splits into 8 second-level patches of side
``s2 = s1 / 2``. Masking operates on second-level patches.

Index conventions (used by every module that talks about sub-volumes):

* sub-volume ``r`` is the C-order (last axis fastest) index over the
  ``(H/s1, W/s1, D/s1)`` grid;
* patch ``k`` inside a sub-volume is the octant ``(a, b, c)`` with
  ``k = 4a + 2b + c``, where ``a, b, c`` are the offsets along H, W, D;
* global patch index is ``8 r + k``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

PLAN_MAGIC = b"HMPL"
PLAN_VERSION = 1
_PLAN_HEADER = struct.Struct("<4sHHd6I")


@dataclass(frozen=True)
class GridSpec:
    volume_shape: tuple
    sub_volume_size: int
    patch_size: int

    def __post_init__(self):
        shape = tuple(int(s) for s in self.volume_shape)
        object.__setattr__(self, "volume_shape", shape)
        s1, s2 = int(self.sub_volume_size), int(self.patch_size)
        if len(shape) != 3:
            raise ConfigError(f"volume_shape must have 3 entries, got {shape}")
        if s2 < 1 or s1 != 2 * s2:
            raise ConfigError(f"sub_volume_size must be twice patch_size, got {s1} and {s2}")
        if any(n % s1 for n in shape):
            raise ConfigError(f"volume_shape {shape} is not divisible by sub_volume_size {s1}")

    @property
    def grid_dims(self) -> tuple:
        return tuple(n // self.sub_volume_size for n in self.volume_shape)

    @property
    def n_subvolumes(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def n_patches(self) -> int:
        return 8 * self.n_subvolumes


def masked_count(ratio: float, n_patches: int) -> int:
    """``round(ratio * n)`` with halves rounded away from zero."""
    return int(math.floor(ratio * n_patches + 0.5))


@dataclass(frozen=True, eq=False)
class MaskPlan:
    grid: GridSpec
    ratio: float
    masked: np.ndarray  # (8R,) bool, global patch order
    location_labels: np.ndarray = field(init=False)  # (R, 8) uint8
    count_labels: np.ndarray = field(init=False)  # (R, 9) one-hot uint8

    def __post_init__(self):
        masked = np.asarray(self.masked, dtype=bool).reshape(-1)
        if masked.size != self.grid.n_patches:
            raise DimensionError(f"plan has {masked.size} patches, grid needs {self.grid.n_patches}")
        masked.setflags(write=False)
        loc = masked.reshape(-1, 8).astype(np.uint8)
        counts = loc.sum(axis=1)
        onehot = np.zeros((loc.shape[0], 9), dtype=np.uint8)
        onehot[np.arange(loc.shape[0]), counts] = 1
        for arr in (loc, onehot):
            arr.setflags(write=False)
        object.__setattr__(self, "masked", masked)
        object.__setattr__(self, "location_labels", loc)
        object.__setattr__(self, "count_labels", onehot)

    @property
    def counts(self) -> np.ndarray:
        return self.location_labels.sum(axis=1)

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    def voxel_mask(self) -> np.ndarray:
        """Boolean (H, W, D) array, True inside masked patches."""
        gh, gw, gd = self.grid.grid_dims
        s2 = self.grid.patch_size
        m = self.masked.reshape(gh, gw, gd, 2, 2, 2).transpose(0, 3, 1, 4, 2, 5)
        m = m.reshape(2 * gh, 2 * gw, 2 * gd)
        for axis in range(3):
            m = np.repeat(m, s2, axis=axis)
        return m

    def __eq__(self, other):
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return (self.grid == other.grid and self.ratio == other.ratio
                and np.array_equal(self.masked, other.masked))

    def __hash__(self):
        return hash((self.grid, self.ratio, self.masked.tobytes()))

    # -- binary record ----------------------------------------------------
    def to_bytes(self) -> bytes:
        """Header (magic, version, reserved, ratio, H, W, D, s1, s2, n) + LSB-first bitset."""
        g = self.grid
        header = _PLAN_HEADER.pack(PLAN_MAGIC, PLAN_VERSION, 0, float(self.ratio),
                                   *g.volume_shape, g.sub_volume_size, g.patch_size, g.n_patches)
        return header + np.packbits(self.masked, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MaskPlan":
        if len(blob) < _PLAN_HEADER.size:
            raise FormatError("mask plan record shorter than its header", offset=len(blob))
        magic, version, _, ratio, h, w, d, s1, s2, n = _PLAN_HEADER.unpack_from(blob)
        if magic != PLAN_MAGIC:
            raise FormatError(f"bad mask plan magic {magic!r}", offset=0)
        if version != PLAN_VERSION:
            raise FormatError(f"unsupported mask plan version {version}", offset=4)
        grid = GridSpec((h, w, d), s1, s2)
        nbytes = (n + 7) // 8
        body = blob[_PLAN_HEADER.size:]
        if len(body) != nbytes or n != grid.n_patches:
            raise FormatError(f"bitset should hold {grid.n_patches} bits in {nbytes} bytes, "
                              f"found {len(body)} bytes", offset=_PLAN_HEADER.size)
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="little")[:n]
        return cls(grid, ratio, bits.astype(bool))


def make_plan(grid: GridSpec, ratio: float, seed: Union[int, np.random.SeedSequence]) -> MaskPlan:
    """Mask ``round(ratio * 8R)`` patches drawn uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    n = grid.n_patches
    masked = np.zeros(n, dtype=bool)
    masked[rng.choice(n, size=masked_count(ratio, n), replace=False)] = True
    return MaskPlan(grid, float(ratio), masked)


def apply_mask(x: np.ndarray, plan: MaskPlan, fill: float = 0.0) -> np.ndarray:
    """Copy of ``x`` (..., H, W, D) with masked patches set to ``fill``."""
    x = np.asarray(x)
    if x.shape[-3:] != plan.grid.volume_shape:
        raise DimensionError(f"volume shape {x.shape} does not match grid {plan.grid.volume_shape}")
    out = x.copy()
    out[..., plan.voxel_mask()] = fill
    return out


@dataclass(frozen=True)
class TargetRegion:
    center_cube_size: int
    selected_subvolumes: tuple
    grid: Optional[GridSpec] = None

    @property
    def size(self) -> int:
        return len(self.selected_subvolumes)

    def cell_box(self) -> tuple:
        """Per-axis half-open bounds (lo, hi) of the selection in grid cells."""
        if self.grid is None or not self.selected_subvolumes:
            raise ConfigError("target region has no sub-volumes")
        cells = np.array(np.unravel_index(list(self.selected_subvolumes), self.grid.grid_dims)).T
        return tuple((int(lo), int(hi) + 1) for lo, hi in zip(cells.min(axis=0), cells.max(axis=0)))

    def voxel_box(self) -> tuple:
        s1 = self.grid.sub_volume_size
        return tuple((lo * s1, hi * s1) for lo, hi in self.cell_box())


def select_target_region(grid: GridSpec, cube_size: int) -> TargetRegion:
    """Sub-volumes whose centres lie in the closed cube of side ``cube_size``
    centred on the volume centre."""
    s1 = grid.sub_volume_size
    if cube_size < s1:
        raise ConfigError(f"target cube {cube_size} is smaller than one sub-volume ({s1})")
    if cube_size > min(grid.volume_shape):
        raise ConfigError(f"target cube {cube_size} exceeds the volume {grid.volume_shape}")
    per_axis = []
    for n in grid.volume_shape:
        centers = (np.arange(n // s1) + 0.5) * s1
        lo, hi = (n - cube_size) / 2.0, (n + cube_size) / 2.0
        per_axis.append(np.flatnonzero((centers >= lo) & (centers <= hi)))
    ii, jj, kk = np.meshgrid(*per_axis, indexing="ij")
    flat = np.ravel_multi_index((ii.ravel(), jj.ravel(), kk.ravel()), grid.grid_dims)
    return TargetRegion(int(cube_size), tuple(int(r) for r in np.sort(flat)), grid)
