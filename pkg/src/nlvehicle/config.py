"""Pipeline configuration: one YAML file with a section per module.

Unknown keys anywhere are rejected. The top-level ``seed`` is the only source
of randomness for every stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentOptions
from .losses import LossWeights
from .model import EncoderConfig
from .synthetic import SceneConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_root: str = "data"
    output_root: str = "runs"
    cache_dir: str = "cache"


@dataclass
class DatasetConfig:
    annotations: str = "tracks.json"
    queries: str = "queries.json"
    truth: str = "truth.json"
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class MotionConfig:
    stride: int = 4
    bg_sample_stride: int = 1


@dataclass
class AugmentConfig:
    options: AugmentOptions = field(default_factory=AugmentOptions)
    client: str = "stub"
    output: str = "tracks_aug.json"


@dataclass
class EvalConfig:
    num_frames: int = 8
    all_frames: bool = False
    normalize: str = "post"


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.train.seed = self.seed
        self.train.motion_stride = self.motion.stride
        self.train.bg_sample_stride = self.motion.bg_sample_stride

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# nested dataclass fields and keys that other sections own
_NESTED = {
    (DatasetConfig, "scene"): SceneConfig,
    (AugmentConfig, "options"): AugmentOptions,
    (TrainConfig, "weights"): LossWeights,
    (PipelineConfig, "paths"): PathsConfig,
    (PipelineConfig, "dataset"): DatasetConfig,
    (PipelineConfig, "motion"): MotionConfig,
    (PipelineConfig, "augment"): AugmentConfig,
    (PipelineConfig, "model"): EncoderConfig,
    (PipelineConfig, "train"): TrainConfig,
    (PipelineConfig, "eval"): EvalConfig,
}
_DERIVED = {
    TrainConfig: {"seed", "motion_stride", "bg_sample_stride"},
    EncoderConfig: {"vocab_size", "num_tracks", "embed_dim"},
}


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(cls, set())
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get((cls, key))
        kwargs[key] = _build(nested, value, f"{where}.{key}") if nested else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data: dict | None) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "config")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return parse_config(data)
