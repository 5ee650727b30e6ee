"""Experiment configuration: one YAML document drives every subcommand.

Unknown keys are rejected by name, nested sections map onto the
component dataclasses, and the resolved form (defaults filled in) is
what gets written into a run directory and hashed for checkpoint
verification.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .checkpoints import config_dump
from .common import ConfigError
from .data import DataConfig
from .tokenizer import TokenizerConfig
from .training import TrainSchedule
from .velocity_model import GenConfig


@dataclasses.dataclass
class PretrainConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    color_jitter: bool = True
    invariance_weight: float = 0.0


@dataclasses.dataclass
class GenSettings:
    """Generator architecture and sampler knobs, before shape binding."""

    depth: int = 6
    dim: int = 256
    heads: int = 4
    ffn_dim: int | None = None
    head_depth: int = 0
    head_dim: int | None = None
    head_ffn_dim: int | None = None
    label_drop: float = 0.1
    time_freq_dim: int = 128
    lambda_query: float = 1.0
    steps: int = 50
    alpha: float = 3.0
    guidance_scale: float = 1.6
    sigma_aug: float = 0.1

    def bind(self, n_patch: int, n_query: int, latent_dim: int, class_count: int) -> GenConfig:
        return GenConfig(
            n_patch=n_patch,
            n_query=n_query,
            latent_dim=latent_dim,
            depth=self.depth,
            dim=self.dim,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            head_depth=self.head_depth,
            head_dim=self.head_dim,
            head_ffn_dim=self.head_ffn_dim,
            class_count=class_count,
            label_drop=self.label_drop,
            time_freq_dim=self.time_freq_dim,
            lambda_query=self.lambda_query,
            steps=self.steps,
            alpha=self.alpha,
            guidance_scale=self.guidance_scale,
            sigma_aug=self.sigma_aug,
        )


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/exp"
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = dataclasses.field(default_factory=TokenizerConfig)
    generator: GenSettings = dataclasses.field(default_factory=GenSettings)
    pretrain: PretrainConfig = dataclasses.field(default_factory=PretrainConfig)
    tokenizer_train: TrainSchedule = dataclasses.field(default_factory=TrainSchedule)
    generator_train: TrainSchedule = dataclasses.field(default_factory=TrainSchedule)

    def __post_init__(self):
        if self.data.image_size != self.tokenizer.backbone.image_size:
            raise ConfigError(
                f"data image_size {self.data.image_size} does not match backbone "
                f"image_size {self.tokenizer.backbone.image_size}"
            )
        self.tokenizer_train.seed = self.seed
        self.generator_train.seed = self.seed + 1

    def to_dict(self) -> dict:
        return config_dump(self)

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def _from_dict(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} in {cls.__name__} section")
        hint = hints.get(key)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            kwargs[key] = _from_dict(hint, value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def experiment_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data or {})


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with path.open() as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return experiment_from_dict(data)


def dump_experiment(cfg: ExperimentConfig, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
