"""Dataclass configs and their JSON (de)serialisation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


SHAPE_CLASSES = ("square", "circle", "triangle", "cross")


@dataclass
class DatasetConfig:
    n_train: int = 240
    n_seen: int = 60
    n_unseen: int = 60
    n_null: int = 40
    frames: int = 4
    size: int = 16
    object_size: int = 5
    speed: int = 1
    min_objects: int = 2
    max_objects: int = 4
    holdout: tuple[str, ...] = ("cross",)
    p_silent: float = 0.3
    p_silent_null: float = 0.6
    p_train_null: float = 0.5
    audio_noise: float = 0.1

    def validate(self):
        if self.frames < 2:
            raise ConfigError("frames must be >= 2")
        if not 2 <= self.min_objects <= self.max_objects <= 4:
            raise ConfigError("objects per scene must satisfy 2 <= min <= max <= 4")
        if self.speed < 1:
            raise ConfigError("speed must be a positive number of pixels per frame")
        if self.object_size < 3 or self.object_size + self.speed * (self.frames - 1) + 1 > self.size:
            raise ConfigError("object_size too large for the canvas and clip length")
        unknown = set(self.holdout) - set(SHAPE_CLASSES)
        if unknown:
            raise ConfigError(f"unknown holdout classes: {sorted(unknown)}")
        if len(set(self.holdout)) >= len(SHAPE_CLASSES):
            raise ConfigError("every shape class is held out; nothing left to train on")
        if self.n_unseen > 0 and not self.holdout:
            raise ConfigError("unseen-test split requested but no holdout classes given")
        for name in ("n_train", "n_seen", "n_unseen", "n_null"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1")
        if not 0.0 <= self.p_silent < 1.0 or not 0.0 <= self.p_silent_null <= 1.0 or not 0.0 <= self.p_train_null <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1)")
        if self.audio_noise < 0 or self.audio_noise >= 0.5:
            raise ConfigError("audio_noise must lie in [0, 0.5)")
        return self


@dataclass
class ModelConfig:
    feat_dim: int = 32
    patch: int = 4
    model_dim: int = 96
    layers: int = 2
    heads: int = 4
    max_len: int = 96
    seg_dim: int = 32
    seg_patch: int = 4
    hyper_dim: int = 8
    patch_pos: bool = True
    extractor_seed: int = 1234

    def validate(self):
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if min(self.feat_dim, self.model_dim, self.layers, self.heads, self.seg_dim, self.hyper_dim) < 1:
            raise ConfigError("model dimensions must be positive")
        return self


@dataclass
class Ablation:
    drop_audio: bool = False
    drop_vt: bool = False
    drop_vs: bool = False
    drop_vf: bool = False
    disable_sa: bool = False


@dataclass
class RunConfig:
    dataset: str = "data"
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 8
    lam: float = 0.1
    tau: float = 0.07
    sa_cosine: bool = True
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self):
        self.model.validate()
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for positive sets")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs and lr must be positive")
        return self

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.ablation.disable_sa else self.lam


def _build(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    extra = set(data) - set(known)
    if extra:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(extra)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{cls.__name__}.{key}: expected a boolean")
            kwargs[key] = value
        elif isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{cls.__name__}.{key}: expected a number")
        else:
            kwargs[key] = type(default)(value)
    return cls(**kwargs)


def from_dict(cls, data):
    return _build(cls, data).validate()


def load_config(cls, path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(cls, data)


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def config_hash(cfg) -> str:
    """Short digest of the settings; input and output paths are left out."""
    data = {k: v for k, v in to_dict(cfg).items() if k not in ("dataset", "out")}
    blob = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
