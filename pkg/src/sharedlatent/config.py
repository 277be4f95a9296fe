"""Experiment configuration: one nested JSON file, validated before any compute."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .diffusion import Stage2Config
from .generator import Stage1Config

OUTPUT_ROOT_ENV = "SHAREDLATENT_OUTPUT_ROOT"
DATASET_KINDS = ("glyphs", "polygon_views", "linear_gaussian")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "glyphs"
    n_train: int = 6000
    n_test: int = 1000
    n_modalities: int = 3          # glyphs / linear_gaussian
    n_views: int = 8               # polygon_views
    image_side: int = 16
    n_classes: int = 10
    latent_dim: int = 2            # linear_gaussian
    obs_dim: int = 4               # linear_gaussian, per modality
    noise_scale: float = 0.5       # linear_gaussian
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.n_train <= 0 or self.n_test < 0 or self.image_side <= 0:
            raise ConfigError("dataset sizes must be positive")


@dataclass
class ModelSection:
    latent_dim: int = 16
    embed_dim: int = 64
    fused_dim: int = 128
    fusion: str = "concat"
    width: int = 32


@dataclass
class EvalConfig:
    classifier_iterations: int = 800
    classifier_gate: float = 0.98
    n_generate: int = 1000
    guidance: float = 1.0
    baselines: dict = field(default_factory=dict)   # name -> run directory


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        return Path(root) / out if root and not out.is_absolute() else out


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


_SECTIONS = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "model"): ModelSection,
    (ExperimentConfig, "stage1"): Stage1Config,
    (ExperimentConfig, "stage2"): Stage2Config,
    (ExperimentConfig, "eval"): EvalConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file {path} not found") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# config -> objects


def build_datasets(cfg: ExperimentConfig):
    """Regenerate (train, test) splits from the dataset section; identical bytes on every call."""
    from .datagen import (
        GlyphDatasetSpec,
        LinearGaussianSpec,
        PolygonViewsSpec,
        make_glyph_dataset,
        make_linear_gaussian_dataset,
        make_polygon_views_dataset,
    )

    d = cfg.dataset
    n = d.n_train + d.n_test
    if d.kind == "glyphs":
        ds = make_glyph_dataset(GlyphDatasetSpec.default(d.n_modalities, n, d.seed, n_classes=d.n_classes,
                                                         image_side=d.image_side))
    elif d.kind == "polygon_views":
        ds = make_polygon_views_dataset(PolygonViewsSpec(n, d.n_views, d.n_classes, d.image_side, d.seed))
    else:
        spec = LinearGaussianSpec.orthogonal(d.latent_dim, (d.obs_dim,) * d.n_modalities, n, d.seed,
                                             d.noise_scale)
        ds, _ = make_linear_gaussian_dataset(spec)
    return ds.split(d.n_train)


def build_model_config(cfg: ExperimentConfig, shapes):
    from .generator import ModelConfig

    m = cfg.model
    scales = [cfg.dataset.noise_scale] * len(shapes) if cfg.dataset.kind == "linear_gaussian" else None
    return ModelConfig(shapes, m.latent_dim, m.embed_dim, m.fused_dim, m.fusion, m.width, obs_scales=scales)
