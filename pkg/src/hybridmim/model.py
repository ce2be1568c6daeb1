"""Multi-scale 3D UNet with the four pre-training heads.

The encoder downsamples by ``2**depth``; when that equals the sub-volume
size each bottleneck cell sees exactly one first-level sub-volume, so the
count and location heads are per-cell linear maps. Smaller downsample
factors are average-pooled onto the sub-volume grid.

The reconstruction path can decode only the bounding box of a target region
(partial reconstruction); skips are cropped to the same box at every scale.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionError, FormatError, StateError
from .masking import GridSpec, TargetRegion
from .nn import Conv3d, ConvTranspose3d, InstanceNorm3d, Linear, Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    grid: GridSpec
    in_channels: int = 1
    base_width: int = 8
    depth: Optional[int] = None
    dropout_rate: float = 0.1
    projection_dim: int = 32
    max_width: int = 64
    norm: str = "instance"  # "instance" | "none"

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        s1 = self.grid.sub_volume_size
        if self.depth is None:
            self.depth = int(round(math.log2(s1)))
        if self.depth < 1 or s1 % (2 ** self.depth):
            raise ConfigError(f"encoder downsample 2**{self.depth} must divide the sub-volume size {s1}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"norm must be 'instance' or 'none', got {self.norm!r}")
        if min(self.in_channels, self.base_width, self.projection_dim) < 1:
            raise ConfigError("channel counts must be positive")

    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** level, self.max_width) for level in range(self.depth + 1)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"]["volume_shape"] = list(self.grid.volume_shape)
        return d


@dataclass
class Predictions:
    recon: Optional[Tensor]
    num_logits: Tensor
    loc_probs: Tensor
    feature: Tensor
    recon_box: Optional[tuple] = None  # voxel bounds covered by recon

    @property
    def num_probs(self) -> Tensor:
        return T.softmax(self.num_logits, axis=-1)


class ConvBlock(Module):
    """conv -> (instance norm) -> activation."""

    def __init__(self, cin, cout, kernel, stride, padding, norm: str, rng):
        # a bias right before normalization is cancelled by the mean subtraction
        self.conv = Conv3d(cin, cout, kernel, stride, padding, rng=rng, bias=norm != "instance")
        self.norm = InstanceNorm3d(cout) if norm == "instance" else None

    def __call__(self, x):
        h = self.conv(x)
        if self.norm is not None:
            return T.leaky_relu(self.norm(h))
        return T.relu(h)


class EncoderStage(Module):
    def __init__(self, cin, cout, first: bool, norm: str, rng):
        kernel, stride, pad = (3, 1, 1) if first else (2, 2, 0)
        self.conv_a = ConvBlock(cin, cout, kernel, stride, pad, norm, rng)
        self.conv_b = ConvBlock(cout, cout, 3, 1, 1, norm, rng)

    def __call__(self, x):
        return self.conv_b(self.conv_a(x))


class DecoderStage(Module):
    def __init__(self, cin, cout, norm: str, rng):
        self.up = ConvTranspose3d(cin, cout, 2, 2, rng=rng)
        self.conv_a = ConvBlock(2 * cout, cout, 3, 1, 1, norm, rng)
        self.conv_b = ConvBlock(cout, cout, 3, 1, 1, norm, rng)

    def __call__(self, x, skip):
        return self.conv_b(self.conv_a(T.concat([self.up(x), skip], axis=1)))


def _crop(x: Tensor, box, scale: int) -> Tensor:
    if box is None:
        return x
    sl = tuple(slice(lo // scale, hi // scale) for lo, hi in box)
    if all(s.start == 0 and s.stop == n for s, n in zip(sl, x.shape[-3:])):
        return x
    return x[(slice(None), slice(None)) + sl]


class HybridUNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        widths = cfg.widths()
        self.encoder = [EncoderStage(cfg.in_channels if i == 0 else widths[i - 1], widths[i], i == 0,
                                     cfg.norm, rng)
                        for i in range(cfg.depth + 1)]
        self.decoder = [DecoderStage(widths[i + 1], widths[i], cfg.norm, rng) for i in range(cfg.depth)]
        self.num_head = Linear(widths[-1], 9, rng=rng)
        self.loc_head = Linear(widths[-1], 8, rng=rng)
        self.projection = Linear(widths[-1], cfg.projection_dim, rng=rng)
        self.head = Conv3d(widths[0], cfg.in_channels, 1, rng=rng)
        self.head_kind = "recon"

    # -- building blocks ----------------------------------------------------
    def _prepare(self, x) -> tuple[Tensor, bool]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 4
        if single:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels or x.shape[2:] != self.cfg.grid.volume_shape:
            raise DimensionError(f"expected (N, {self.cfg.in_channels}, *{self.cfg.grid.volume_shape}) "
                                 f"input, got {x.shape}")
        return x, single

    def encode(self, x: Tensor, training: bool, rng: np.random.Generator) -> list[Tensor]:
        skips = []
        h = x
        for stage in self.encoder:
            h = T.dropout(stage(h), self.cfg.dropout_rate, training, rng)
            skips.append(h)
        return skips

    def decode(self, skips: list[Tensor], box=None) -> Tensor:
        depth = self.cfg.depth
        h = _crop(skips[-1], box, 2 ** depth)
        for level in reversed(range(depth)):
            h = self.decoder[level](h, _crop(skips[level], box, 2 ** level))
        return self.head(h)

    def cell_features(self, bottleneck: Tensor) -> Tensor:
        """(N, C, h, w, d) bottleneck -> (N, R, C) in sub-volume order."""
        n, c = bottleneck.shape[:2]
        gh, gw, gd = self.cfg.grid.grid_dims
        per = bottleneck.shape[2] // gh
        if per > 1:
            bottleneck = T.mean(bottleneck.reshape(n, c, gh, per, gw, per, gd, per), axis=(3, 5, 7))
        return T.transpose(bottleneck, (0, 2, 3, 4, 1)).reshape(n, gh * gw * gd, c)

    # -- public forwards ----------------------------------------------------
    def forward_pretrain(self, x, training: bool = True, seed=None, region: Optional[TargetRegion] = None,
                         decode: bool = True) -> Predictions:
        """Reconstruction, count, location and projection outputs.

        ``seed`` fixes the dropout masks. With ``region`` only its bounding
        box is decoded; ``decode=False`` skips the decoder entirely (the
        second contrastive pass needs only the projection).
        """
        if self.head_kind != "recon":
            raise StateError("reconstruction head was replaced; use forward_segment")
        x, single = self._prepare(x)
        rng = np.random.default_rng(seed)
        skips = self.encode(x, training, rng)
        bott = skips[-1]
        cells = self.cell_features(bott)
        num_logits = self.num_head(cells)
        loc_probs = T.sigmoid(self.loc_head(cells))
        feature = T.l2_normalize(self.projection(T.global_avg_pool(bott)), axis=-1)

        recon, box = None, None
        if decode:
            box = region.voxel_box() if region is not None else None
            recon = self.decode(skips, box)
            if box is None:
                box = tuple((0, n) for n in self.cfg.grid.volume_shape)
        if single:
            recon = recon.reshape(recon.shape[1:]) if recon is not None else None
            num_logits = num_logits.reshape(num_logits.shape[1:])
            loc_probs = loc_probs.reshape(loc_probs.shape[1:])
            feature = feature.reshape(feature.shape[1:])
        return Predictions(recon, num_logits, loc_probs, feature, box)

    def forward_segment(self, x, training: bool = False, seed=None) -> Tensor:
        """Per-voxel class logits (N, c, H, W, D) from the segmentation head."""
        if self.head_kind != "segment":
            raise StateError("no segmentation head attached; call replace_head first")
        x, single = self._prepare(x)
        skips = self.encode(x, training, np.random.default_rng(seed))
        logits = self.decode(skips)
        return logits.reshape(logits.shape[1:]) if single else logits

    @property
    def classes(self) -> int:
        return self.head.weight.shape[0]


def replace_head(model: HybridUNet, c: int, seed: int = 0) -> HybridUNet:
    """Copy of ``model`` whose last layer is a fresh random c x 1x1x1 convolution."""
    if c < 1:
        raise ConfigError(f"number of segmentation classes must be >= 1, got {c}")
    new = copy.deepcopy(model)
    new.zero_grad()
    new.head = Conv3d(model.cfg.widths()[0], c, 1, rng=np.random.default_rng(seed))
    new.head.weight.data = new.head.weight.data.astype(model.head.weight.dtype)
    new.head.bias.data = new.head.bias.data.astype(model.head.bias.dtype)
    new.head_kind = "segment"
    return new


# -- checkpoint file ----------------------------------------------------------
#
# little-endian layout:
#   magic "HMCK" | version u16 | reserved u16 | meta_len u32 | meta (UTF-8 JSON)
#   n_blobs u32 | n_blobs x [name_len u16 | name | ndim u8 | dims u32 x ndim | f32 data]
# blob names: "model/<param>" for weights, anything else is caller state
# (e.g. "optim/m/<param>").

CKPT_MAGIC = b"HMCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model: HybridUNet
    arrays: dict
    meta: dict


def save_checkpoint(path: Union[str, Path], model: HybridUNet, arrays: Optional[dict] = None,
                    meta: Optional[dict] = None) -> Path:
    path = Path(path)
    header = {"model_config": model.cfg.to_dict(), "head_kind": model.head_kind,
              "head_channels": model.classes, **(meta or {})}
    blobs = [(f"model/{name}", p.data) for name, p in model.named_parameters()]
    blobs += sorted((arrays or {}).items())
    meta_bytes = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HHI", CKPT_VERSION, 0, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(blobs))]
    for name, arr in blobs:
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def _read_blobs(buf: bytes):
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    off = 4
    try:
        version, _, meta_len = struct.unpack_from("<HHI", buf, off)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=off)
        off += 8
        meta = json.loads(buf[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        blobs = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            nbytes = 4 * int(np.prod(shape))
            if off + nbytes > len(buf):
                raise FormatError(f"blob {name} is truncated", offset=off)
            blobs[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"checkpoint truncated: {exc}", offset=off) from exc
    return meta, blobs


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Rebuild the model stored at ``path``.

    With ``expected`` the stored weights must fit a model of that config;
    otherwise :class:`CheckpointError` lists every mismatched shape.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    meta, blobs = _read_blobs(buf)
    stored_cfg = ModelConfig(**meta["model_config"])
    cfg = expected or stored_cfg
    model = HybridUNet(cfg)
    if meta.get("head_kind") == "segment":
        model = replace_head(model, int(meta["head_channels"]))
    weights = {k[len("model/"):]: v for k, v in blobs.items() if k.startswith("model/")}
    params = dict(model.named_parameters())
    problems = []
    for name, p in params.items():
        if name not in weights:
            problems.append(f"{name}: missing (expected {p.shape})")
        elif weights[name].shape != p.shape:
            problems.append(f"{name}: checkpoint {weights[name].shape} vs model {p.shape}")
    problems += [f"{name}: unexpected {arr.shape}" for name, arr in weights.items() if name not in params]
    if problems:
        raise CheckpointError(f"checkpoint {path} does not fit the model:\n  " + "\n  ".join(problems))
    model.load_state_dict(weights)
    arrays = {k: v for k, v in blobs.items() if not k.startswith("model/")}
    return Checkpoint(model, arrays, meta)
