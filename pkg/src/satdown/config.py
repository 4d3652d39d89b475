"""Structured run configuration: one YAML document with per-command sections.

Every field is validated up front and unknown keys are rejected, so a typo
fails before any compute starts. CLI flags override config keys.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class SynthSection:
    seed: int = 0
    n_samples: int = 16
    hr_size: tuple[int, int] = (32, 32)
    scale_factor: int = 4
    n_channels_target: int = 4
    n_channels_condition: int = 3
    spectral_exponent: float = 3.0
    station_count: int = 64
    obs_noise_std: float = 0.0
    condition_scale: int = 2
    condition_noise_std: float = 0.05
    condition_tanh: bool = True


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02


@dataclass
class EncoderSection:
    stride: int = 2
    hidden: int = 32
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    holdout_fraction: float = 0.1


@dataclass
class DenoiserSection:
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    res_blocks_per_level: int = 2
    attn_levels: tuple[int, ...] = (1, 2)
    attn_dim: int = 64
    time_dim: int = 128


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    condition_zeroed: bool = False
    train_encoder: bool = False


@dataclass
class SampleSection:
    s: float = 1.0
    l: float = 0.0
    w_grid: float = 1.0
    w_station: float = 0.0
    kernel_size: int = 9
    ddim_steps: int | None = None
    out_scale: int = 4
    patch_size: tuple[int, int] | None = None
    patch_stride: int | None = None
    strict_paper_mode: bool = False


@dataclass
class EvaluateSection:
    n_fields: int = 10
    station_split_seed: int = 0
    baselines: tuple[str, ...] = ("bilinear", "bicubic")


@dataclass
class RunConfig:
    seed: int = 0
    data_root: str | None = None
    synth: SynthSection = field(default_factory=SynthSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)


def _coerce(value, annotation, path: str):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(annotation):
        return _build_section(annotation, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        args = typing.get_args(annotation)
        elem = args[0]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config type {annotation}")


def _build_section(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{path}.{f.name}")
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML ({exc})") from exc
    if data is None:
        data = {}
    return _build_section(RunConfig, data, "config")


def config_hash(config: RunConfig) -> str:
    canon = json.dumps(dataclasses.asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
