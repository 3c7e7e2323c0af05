"""Run configuration: a strict JSON schema over model, training and data settings.

A config file is a JSON object with the sections below. Any key the schema
does not know is rejected, with the dotted path of the offending field::

    {
      "mode": "synthetic-srgb",
      "seed": 0,
      "out": "runs/exp1",
      "model": {"stack": {"embed_dim": 60, ...}, "sne_enabled": true, "mask_stride": 4, ...},
      "train": {"epochs": 100, "batch_size": 4, "crop": 128, ...},
      "data": {"train_dir": "...", "val_dir": "...", "toy_images": null},
      "ablation": {"seeds": [0, 1, 2]}
    }
"""
from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cadt import StackConfig
from .errors import ConfigError
from .model import MODES, ModelConfig
from .trainer import TrainConfig

DATA_ROOT_ENV = "DENOISE_DATA_ROOT"
PRESETS = ("paper", "toy")
REAL_NOISE_PD = 2


@dataclass(frozen=True)
class DataConfig:
    train_dir: str | None = None
    val_dir: str | None = None
    # generate this many procedural greyscale images instead of reading a directory
    toy_images: int | None = None
    toy_size: int = 64
    toy_val: int = 4

    def __post_init__(self):
        if self.toy_images is not None and self.toy_images <= self.toy_val:
            raise ConfigError("toy_images must exceed toy_val")
        if self.toy_val < 0 or self.toy_size < 8:
            raise ConfigError("toy_val must be >= 0 and toy_size >= 8")


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "synthetic-srgb"
    seed: int = 0
    out: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.model.mode != self.mode:
            raise ConfigError(f"model.mode: {self.model.mode!r} disagrees with mode {self.mode!r}")
        cell = self.model.pd_factor * self.model.mask_stride
        crop = self.train.crop // 2 if self.mode == "raw-bayer" else self.train.crop
        if crop % cell:
            raise ConfigError(f"train.crop: packed crop {crop} not divisible by pd_factor*mask_stride = {cell}")
        if self.data.toy_images is not None and self.mode != "grey":
            raise ConfigError("data.toy_images: procedural images are greyscale, set mode to 'grey'")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        for arm in typing.get_args(hint):
            try:
                return _check_type(value, arm, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: {value!r} does not match {_name(hint)}")
    if hint is type(None):
        if value is not None:
            raise ConfigError(f"{path}: expected null")
        return None
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        inner = typing.get_args(hint)[0]
        return tuple(_check_type(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    raise ConfigError(f"{path}: unsupported field type {hint}")


def _name(hint) -> str:
    return " | ".join(getattr(a, "__name__", str(a)) for a in typing.get_args(hint)) or str(hint)


def _build(cls, raw, path: str, base=None):
    """Validate ``raw`` against dataclass ``cls``; missing keys come from ``base``."""
    where = path or "config"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        dotted = ", ".join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"unknown key(s): {dotted}")
    base = base if base is not None else cls()
    kwargs = {}
    for name in known:
        sub = f"{path}.{name}" if path else name
        current = getattr(base, name)
        if name not in raw:
            kwargs[name] = current
        elif dataclasses.is_dataclass(hints[name]):
            kwargs[name] = _build(hints[name], raw[name], sub, current)
        else:
            kwargs[name] = _check_type(raw[name], hints[name], sub)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def preset(name: str) -> RunConfig:
    """Named starting points. ``paper`` keeps the published hyperparameters; ``toy`` runs in minutes."""
    if name == "paper":
        return RunConfig()
    if name == "toy":
        stack = StackConfig(groups=1, units_per_group=2, embed_dim=16, window=4, heads=2)
        return RunConfig(
            mode="grey",
            model=ModelConfig(stack=stack, mode="grey", mask_stride=4, pd_factor=1),
            # 48 small-crop steps per epoch and a faster decay; the default
            # 4 steps leave the local branch undertrained after 20 epochs
            train=TrainConfig(epochs=20, batch_size=4, crop=32, lr_init=3e-3, lr_step=10,
                              sigma_min=25.0, sigma_max=25.0, steps_per_epoch=48),
            data=DataConfig(toy_images=20, toy_size=64, toy_val=4),
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


def _mode_defaults(raw: dict, base: RunConfig) -> RunConfig:
    """Carry a top-level mode change into the model section and the raw learning rate."""
    mode = raw.get("mode", base.mode)
    if mode == base.mode or not isinstance(mode, str) or mode not in MODES:
        return base
    model = dataclasses.replace(base.model, mode=mode)
    train = base.train
    if mode == "raw-bayer" and base.train.lr_init == TrainConfig.lr_init:
        train = dataclasses.replace(base.train, lr_init=1e-4)
    return dataclasses.replace(base, mode=mode, model=model, train=train)


def parse_config(raw: dict, base: RunConfig | None = None) -> RunConfig:
    base = base if base is not None else RunConfig()
    cfg = _build(RunConfig, raw, "", _mode_defaults(raw, base))
    model_raw = raw.get("model") if isinstance(raw.get("model"), dict) else {}
    if cfg.train.noise is None and "pd_factor" not in model_raw and cfg.model.pd_factor == 1:
        # real (spatially correlated) noise: pixel-shuffle by 2 unless told otherwise
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, pd_factor=REAL_NOISE_PD))
    return cfg


def load_config(path=None, preset_name: str | None = None) -> RunConfig:
    """Read a JSON config on top of a preset (default ``paper``)."""
    base = preset(preset_name or "paper")
    if path is None:
        return base
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(raw, base)


def default_data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None
