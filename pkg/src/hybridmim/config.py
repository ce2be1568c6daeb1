"""Nested run configuration: YAML files, dotted overrides, typed construction.

A config is a plain nested dict. Every key must exist in the defaults for
its command, so typos fail loudly instead of being ignored.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import re
from pathlib import Path
from typing import Any, Union

import numpy as np
import yaml

from .data import PhantomSpec, load_split, make_corpus
from .errors import ConfigError
from .finetune import FinetuneConfig
from .losses import LossWeights
from .optim import OptimConfig
from .pretrain import MODEL_KEYS, PretrainConfig

_MODEL_DEFAULTS = {"in_channels": 1, "base_width": 4, "depth": None, "dropout_rate": 0.1,
                   "projection_dim": 16, "max_width": 32, "norm": "instance"}
assert set(_MODEL_DEFAULTS) == set(MODEL_KEYS)

_PHANTOM_DEFAULTS = {k: v for k, v in dataclasses.asdict(PhantomSpec()).items() if k != "seed"}
_PHANTOM_DEFAULTS["volume_shape"] = [32, 32, 32]
_PHANTOM_DEFAULTS["axis_range"] = list(_PHANTOM_DEFAULTS["axis_range"])
_GRID = {"volume_shape": [32, 32, 32], "sub_volume_size": 16, "patch_size": 8}
_OPTIM = {k: v for k, v in dataclasses.asdict(OptimConfig()).items() if k != "total_steps"}

PRETRAIN_DEFAULTS = {
    "seed": 0,
    "mask_ratio": 0.4,
    "target_cube": None,
    "batch_size": 2,
    "total_steps": 200,
    "checkpoint_every": 50,
    "mask_fill": 0.0,
    "grid": dict(_GRID),
    "model": dict(_MODEL_DEFAULTS),
    "weights": dataclasses.asdict(LossWeights()),
    "optim": {**_OPTIM, "lr_init": 1e-3},
    "data": {"manifest": None, "n_volumes": 32, "seed": 0, "normalize": False,
             "phantom": dict(_PHANTOM_DEFAULTS)},
}

FINETUNE_DEFAULTS = {
    "seed": 0,
    "classes": 3,
    "epochs": 12,
    "batch_size": 2,
    "label_fraction": 1.0,
    "augment": True,
    "steps_per_epoch": None,
    "grid": dict(_GRID),
    "model": dict(_MODEL_DEFAULTS),
    "optim": {**_OPTIM, "lr_init": 3e-3},
    "data": {"manifest": None, "n_train": 10, "n_val": 8, "seed": 1234, "normalize": False,
             "phantom": dict(_PHANTOM_DEFAULTS)},
}


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e-3" (no dot) as a string
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."))


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}' expects a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override '{text}' has an empty key")
    return key, _load_yaml(raw) if raw.strip() else None


def apply_overrides(cfg: dict, overrides, defaults: dict) -> dict:
    for text in overrides or ():
        key, value = parse_override(text)
        node = {}
        cur = node
        parts = key.split(".")
        for part in parts[:-1]:
            cur[part] = {}
            cur = cur[part]
        cur[parts[-1]] = value
        cfg = _merge(defaults, _deep_update(cfg, node), "")
    return cfg


def _deep_update(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and value:
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Union[str, Path, None], defaults: dict, overrides=()) -> dict:
    """Defaults, then the file (a config or a run manifest), then overrides."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            text = path.read_text()
            raw = (json.loads(text) if path.suffix == ".json" else _load_yaml(text)) or {}
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        if "config" in raw and "tool_version" in raw:  # a run manifest
            raw = raw["config"]
    cfg = _merge(defaults, raw)
    return apply_overrides(cfg, overrides, defaults)


def _phantom_template(d: dict) -> PhantomSpec:
    p = dict(d["phantom"])
    p["volume_shape"] = tuple(p["volume_shape"])
    p["axis_range"] = tuple(p["axis_range"])
    return PhantomSpec(**p)


def pretrain_from_dict(cfg: dict) -> PretrainConfig:
    return PretrainConfig(
        grid=dict(cfg["grid"]), mask_ratio=float(cfg["mask_ratio"]), target_cube=cfg["target_cube"],
        weights=dict(cfg["weights"]), optim=dict(cfg["optim"]), batch_size=int(cfg["batch_size"]),
        total_steps=int(cfg["total_steps"]), seed=int(cfg["seed"]),
        checkpoint_every=int(cfg["checkpoint_every"]), mask_fill=float(cfg["mask_fill"]),
        model=dict(cfg["model"]))


def finetune_from_dict(cfg: dict, init: str = "scratch") -> FinetuneConfig:
    return FinetuneConfig(
        grid=dict(cfg["grid"]), init=init, classes=int(cfg["classes"]), epochs=int(cfg["epochs"]),
        optim=dict(cfg["optim"]), augment=bool(cfg["augment"]), label_fraction=float(cfg["label_fraction"]),
        batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]), model=dict(cfg["model"]),
        steps_per_epoch=cfg["steps_per_epoch"])


def pretrain_volumes(cfg: dict) -> list:
    d = cfg["data"]
    if d["manifest"]:
        vols = [v for v, _ in load_split(d["manifest"], "train")]
    else:
        vols = [v for v, _ in make_corpus(int(d["n_volumes"]), _phantom_template(d), int(d["seed"]),
                                          normalize=bool(d["normalize"]))]
    if not vols:
        raise ConfigError("pre-training dataset is empty")
    return vols


def finetune_splits(cfg: dict) -> tuple[list, list]:
    d = cfg["data"]
    if d["manifest"]:
        train, val = load_split(d["manifest"], "train"), load_split(d["manifest"], "val")
        if any(lab is None for _, lab in train + val):
            raise ConfigError("fine-tuning manifest records need label paths")
    else:
        n_train, n_val = int(d["n_train"]), int(d["n_val"])
        data = make_corpus(n_train + n_val, _phantom_template(d), int(d["seed"]), normalize=bool(d["normalize"]))
        train, val = data[:n_train], data[n_train:]
    if not train or not val:
        raise ConfigError("fine-tuning needs nonempty train and val splits")
    return train, val


def to_plain(obj):
    """YAML/JSON-safe copy (tuples to lists, numpy scalars to Python)."""
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
