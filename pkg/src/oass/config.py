"""Run configuration: nested dataclasses loaded from YAML or JSON.

Keys mirror the file layout, e.g. ``model.depth`` or ``keypoint.strategy``.
Unknown keys are rejected so that typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: str = "tiny"
    depth: int = 64
    stride: int = 16
    width: int = 16
    csi: str = "off"
    csi_mask: str = "minmax"
    detach_csi_masks: bool = True
    csi_cls: str = "supplement"


@dataclass
class KeypointConfig:
    strategy: str = "max"
    k: int = 4
    min_patch: int = 32
    literal_ctopkw_scaling: bool = False
    # which network's CAMs drive the cut
    source: str = "student"
    # how several boxes of one class combine under gt_bbox: centroid | largest | first
    gt_multi: str = "centroid"


@dataclass
class PatchingConfig:
    interpolation: str = "bilinear"


@dataclass
class LossConfig:
    re_form: str = "l1"


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    ema_decay: float = 0.999
    alpha_final: float = 1 / 15
    rampup_epochs: int = 100
    seed: int = 0
    checkpoint_every: int = 10


@dataclass
class SynthConfig:
    num_images: int = 500
    num_classes: int = 5
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 3
    min_half_size: int = 9
    max_half_size: int = 15
    # integer centre offsets from the image centre are drawn with |d| in [min_offset, max_offset]
    min_offset: int = 20
    max_offset: int = 46
    noise: float = 0.08
    max_tries: int = 200


@dataclass
class DataConfig:
    kind: str = "synth"
    root: str = ""
    train_split: str = "train"
    eval_split: str = "val"
    input_size: int = 512
    scale_min: int = 320
    scale_max: int = 640
    augment: bool = True
    include_difficult: bool = True
    eval_images: int = 200
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    keypoint: KeypointConfig = field(default_factory=KeypointConfig)
    patching: PatchingConfig = field(default_factory=PatchingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _fill(cls, values: dict[str, Any], path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path + key!r}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _fill(type(default), val, f"{path}{key}.")
        else:
            kwargs[key] = _coerce(val, default, path + key)
    return cls(**kwargs)


def _coerce(val: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if isinstance(val, str):
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
        if not isinstance(val, bool):
            raise ConfigError(f"{key}: expected a boolean, got {val!r}")
        return val
    try:
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return str(val) if isinstance(default, str) and val is not None else val


_CHOICES = {
    ("model", "encoder"): ("tiny", "identity", "pointwise"),
    ("model", "csi"): ("on", "off"),
    ("model", "csi_mask"): ("minmax", "relu"),
    ("model", "csi_cls"): ("supplement", "replace"),
    ("keypoint", "strategy"): ("max", "cmax", "ctopk", "ctopkw", "gt_bbox", "center"),
    ("keypoint", "source"): ("student", "teacher"),
    ("keypoint", "gt_multi"): ("centroid", "largest", "first"),
    ("patching", "interpolation"): ("bilinear", "nearest"),
    ("loss", "re_form"): ("l1", "l2"),
    ("data", "kind"): ("synth", "voc"),
}


def validate(cfg: Config) -> Config:
    for (section, key), choices in _CHOICES.items():
        val = getattr(getattr(cfg, section), key)
        if val not in choices:
            raise ConfigError(f"{section}.{key}={val!r}; expected one of {', '.join(choices)}")
    if cfg.keypoint.k < 1:
        raise ConfigError("keypoint.k must be >= 1")
    if not 0.0 <= cfg.train.ema_decay < 1.0:
        raise ConfigError("train.ema_decay must lie in [0, 1)")
    if cfg.train.batch_size < 1 or cfg.train.epochs < 0:
        raise ConfigError("train.batch_size must be >= 1 and train.epochs >= 0")
    if cfg.model.encoder != "identity" and cfg.keypoint.min_patch < cfg.model.stride:
        raise ConfigError("keypoint.min_patch must be at least model.stride")
    return cfg


def from_dict(values: dict[str, Any]) -> Config:
    return validate(_fill(Config, values or {}, ""))


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    """Load a YAML/JSON file and apply ``key.sub=value`` overrides."""
    values: dict[str, Any] = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            values = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = values
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(values)
