"""Configuration dataclasses, file loading, and config hashing.

All experiment-facing settings live here so every run can embed a stable hash
of the exact configuration that produced it.  Defaults encode the toy-scale
geometry: 32x32 RGB images, a (4, 8, 8) latent, 16-bit payloads.
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
    """Raised for malformed or out-of-range configuration values."""


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    kind: str = "linear"  # linear | cosine
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class GeometryConfig:
    image_size: int = 32
    image_channels: int = 3
    latent_channels: int = 4
    latent_size: int = 8
    num_classes: int = 10


@dataclass(frozen=True)
class VAEConfig:
    base_channels: int = 32
    epochs: int = 12
    batch_size: int = 128
    lr: float = 3e-3
    recon_threshold: float = 0.01  # held-out per-pixel MSE bound


@dataclass(frozen=True)
class BaseDiffusionConfig:
    base_channels: int = 32
    emb_dim: int = 96
    epochs: int = 40
    batch_size: int = 128
    lr: float = 2e-3
    p_uncond: float = 0.1
    loss_bound: float = 0.35  # trailing mean of the noise-prediction MSE


@dataclass(frozen=True)
class Stage1Config:
    payload_bits: int = 16
    lambda_perceptual: float = 5.0
    mu_prvl: float = 0.5
    prvl_window: int = 8
    warmstart_threshold: float = 0.1
    warmstart_window: int = 10
    warmstart_max_iters: int = 20_000
    iters: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    distortion_prob: float = 0.5
    distortion_menu: tuple[str, ...] = (
        "jpeg_approx",
        "crop_resize",
        "gaussian_blur",
        "gaussian_noise",
        "color_jitter",
    )
    corner_augment_prob: float = 0.25
    corner_scale_max: float = 1.5


@dataclass(frozen=True)
class PPFTConfig:
    rank: int = 64
    mapper_init: str = "orthogonal"  # orthogonal | normal
    epochs: int = 12
    batch_size: int = 64
    lr: float = 1e-3
    train_alpha: float = 1.0
    merge_alpha: float = 1.05
    dataset_size: int = 10_000
    sample_steps: int = 25
    guidance_scale: float = 7.5
    p_uncond: float = 0.1
    target_patterns: tuple[str, ...] = ("attn", "ff", "conv")
    objective: str = "prior_preserving"  # prior_preserving | naive


@dataclass(frozen=True)
class DecoderFinetuneConfig:
    iters: int = 600
    batch_size: int = 64
    lr: float = 2e-4
    sizes: tuple[int, ...] = (32, 40, 48)
    sample_steps: int = 25
    guidance_scale: float = 7.5


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to train the full watermarking stack."""

    seed: int = 0
    dataset_size: int = 6000
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    base: BaseDiffusionConfig = field(default_factory=BaseDiffusionConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    ppft: PPFTConfig = field(default_factory=PPFTConfig)
    decoder_finetune: DecoderFinetuneConfig = field(default_factory=DecoderFinetuneConfig)


def _to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg) and not isinstance(cfg, type):
        return {f.name: _to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, (list, tuple)):
        return [_to_dict(v) for v in cfg]
    if isinstance(cfg, dict):
        return {k: _to_dict(v) for k, v in cfg.items()}
    return cfg


def config_to_dict(cfg: Any) -> dict:
    return _to_dict(cfg)


def config_hash(cfg: Any) -> str:
    """Stable short hash of a config (dataclass or plain dict)."""
    payload = json.dumps(_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "geometry": GeometryConfig,
    "schedule": ScheduleConfig,
    "vae": VAEConfig,
    "base": BaseDiffusionConfig,
    "stage1": Stage1Config,
    "ppft": PPFTConfig,
    "decoder_finetune": DecoderFinetuneConfig,
}


def _build(cls: type, values: dict) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    coerced = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        if isinstance(v, list):
            v = tuple(v)
        coerced[f.name] = v
    return cls(**coerced)


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data or {})
    kwargs: dict[str, Any] = {}
    for key, cls in _SECTION_TYPES.items():
        if key in data:
            section = data.pop(key)
            if not isinstance(section, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            kwargs[key] = _build(cls, section)
    kwargs.update(_build_scalarish(data))
    return PipelineConfig(**kwargs)


def _build_scalarish(data: dict) -> dict:
    allowed = {"seed", "dataset_size"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    return data


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    """Load a pipeline config from a YAML or JSON file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
    elif path.suffix == ".json":
        data = json.loads(text)
    else:
        raise ConfigError(f"unsupported config extension: {path.suffix}")
    return pipeline_config_from_dict(data)


def replace(cfg, **kwargs):
    """dataclasses.replace that tolerates nested section dicts."""
    updates = {}
    for key, value in kwargs.items():
        if isinstance(value, dict):
            current = getattr(cfg, key)
            updates[key] = dataclasses.replace(current, **value)
        else:
            updates[key] = value
    return dataclasses.replace(cfg, **updates)
