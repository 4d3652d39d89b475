"""Synthetic coupled datasets: HR targets, satellite-like conditions, LR guidance, stations.

Every quantity is a pure function of (config, sample_index), so downstream
claims can be checked against exact ground truth at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .grid import GridField, Station, StationSet, sample_at, save_grid, save_stations

# Sub-stream tags appended to the seed so the per-purpose RNG streams differ.
_TAG_FIELD = 1
_TAG_CONDITION = 2
_TAG_STATIONS = 3
_TAG_MIXING = 4

_EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_samples: int = 16
    hr_size: tuple[int, int] = (32, 32)
    scale_factor: int = 4
    n_channels_target: int = 4
    n_channels_condition: int = 3
    spectral_exponent: float = 3.0
    station_count: int = 64
    obs_noise_std: float = 0.0
    # Condition-coupling knobs; defaults emulate a finer-grid nonlinear proxy.
    condition_scale: int = 2
    condition_noise_std: float = 0.05
    condition_tanh: bool = True
    condition_mixing: tuple[tuple[float, ...], ...] | None = None
    lat_span: float = 180.0

    def __post_init__(self):
        h, w = self.hr_size
        if h % self.scale_factor or w % self.scale_factor:
            raise ValidationError(
                f"hr_size {self.hr_size} not divisible by scale_factor {self.scale_factor}"
            )
        if self.scale_factor < 2:
            raise ValidationError("scale_factor must be >= 2")
        if self.spectral_exponent <= 0:
            raise ValidationError("spectral_exponent must be > 0")
        if self.obs_noise_std < 0:
            raise ValidationError("obs_noise_std must be >= 0")
        if self.condition_scale < 1:
            raise ValidationError("condition_scale must be >= 1")

    @property
    def target_channels(self) -> tuple[tuple[str, str], ...]:
        return tuple((f"var{i}", "1") for i in range(self.n_channels_target))

    @property
    def condition_channels(self) -> tuple[tuple[str, str], ...]:
        return tuple((f"cond{i}", "1") for i in range(self.n_channels_condition))


def _grid_coords(h: int, w: int, lat_span: float) -> tuple[np.ndarray, np.ndarray]:
    # Cell centers: lats descending inside (-span/2, span/2), lons in [0, 360).
    half = lat_span / 2.0
    lats = half - (np.arange(h) + 0.5) * (lat_span / h)
    lons = np.arange(w) * (360.0 / w)
    return lats, lons


def _spectral_amplitude(h: int, w: int, exponent: float) -> np.ndarray:
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    k = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    amp = np.zeros_like(k)
    nz = k > 0
    amp[nz] = k[nz] ** (-exponent / 2.0)
    # Unit variance by Parseval: var = mean(amp^2) for unit white noise input.
    amp /= np.sqrt(np.mean(amp**2))
    return amp


def _mixing_matrix(n: int, seed: int) -> np.ndarray:
    """Fixed cross-channel mixing with unit-norm rows (keeps unit variance)."""
    rng = np.random.default_rng([seed, _TAG_MIXING])
    m = np.eye(n) + 0.6 * rng.standard_normal((n, n))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def generate_field(config: SynthConfig, sample_index: int) -> GridField:
    """HR target: per-channel Gaussian random field with power spectrum ∝ k^(−exponent)."""
    h, w = config.hr_size
    c = config.n_channels_target
    rng = np.random.default_rng([config.seed, _TAG_FIELD, sample_index])
    amp = _spectral_amplitude(h, w, config.spectral_exponent)
    white = rng.standard_normal((c, h, w))
    spectra = np.fft.fft2(white) * amp
    fields = np.real(np.fft.ifft2(spectra))
    mixed = np.einsum("ij,jhw->ihw", _mixing_matrix(c, config.seed), fields)
    lats, lons = _grid_coords(h, w, config.lat_span)
    return GridField(
        values=mixed.astype(np.float32),
        lats=lats,
        lons=lons,
        channels=config.target_channels,
        timestamp=_EPOCH + timedelta(hours=6 * sample_index),
        periodic_lon=True,
    )


def _condition_mixing(config: SynthConfig) -> np.ndarray:
    if config.condition_mixing is not None:
        m = np.asarray(config.condition_mixing, dtype=np.float64)
        if m.shape != (config.n_channels_condition, config.n_channels_target):
            raise ValidationError(
                f"condition_mixing shape {m.shape} != "
                f"({config.n_channels_condition}, {config.n_channels_target})"
            )
        return m
    rng = np.random.default_rng([config.seed, _TAG_CONDITION, _TAG_MIXING])
    m = rng.standard_normal((config.n_channels_condition, config.n_channels_target))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def derive_condition(hr: GridField, config: SynthConfig, sample_index: int = 0) -> GridField:
    """Satellite-like condition: squashed linear mix of the target channels plus noise.

    Generated at condition_scale × the HR grid so the condition-resampling
    path downstream is exercised.
    """
    from .grid import resize

    c, h, w = hr.shape
    if c != config.n_channels_target:
        raise ValidationError("derive_condition: hr channel count does not match config")
    src = hr
    if config.condition_scale != 1:
        src = resize(hr, h * config.condition_scale, w * config.condition_scale, "bilinear")
    mixed = np.einsum("ij,jhw->ihw", _condition_mixing(config), src.values.astype(np.float64))
    if config.condition_tanh:
        mixed = np.tanh(mixed)
    if config.condition_noise_std > 0:
        rng = np.random.default_rng([config.seed, _TAG_CONDITION, sample_index])
        mixed = mixed + config.condition_noise_std * rng.standard_normal(mixed.shape)
    return GridField(
        values=mixed.astype(np.float32),
        lats=src.lats,
        lons=src.lons,
        channels=config.condition_channels,
        timestamp=hr.timestamp,
        periodic_lon=hr.periodic_lon,
    )


def degrade(hr: GridField, scale_factor: int) -> GridField:
    """Ground-truth degradation: non-overlapping box average over s×s blocks."""
    c, h, w = hr.shape
    if h % scale_factor or w % scale_factor:
        raise ValidationError(f"field {h}x{w} not divisible by scale_factor {scale_factor}")
    s = scale_factor
    lr = hr.values.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))
    lats = hr.lats.reshape(h // s, s).mean(axis=1)
    lons = hr.lons.reshape(w // s, s).mean(axis=1)
    return GridField(
        values=lr.astype(np.float32),
        lats=lats,
        lons=lons,
        channels=hr.channels,
        timestamp=hr.timestamp,
        periodic_lon=hr.periodic_lon,
    )


def sample_stations(hr: GridField, config: SynthConfig, sample_index: int = 0) -> StationSet:
    """Random station locations with (optionally noisy) bilinear readings of hr."""
    if config.station_count < 1:
        raise ValidationError("station_count must be >= 1")
    rng = np.random.default_rng([config.seed, _TAG_STATIONS, sample_index])
    lat_lo, lat_hi = float(hr.lats.min()), float(hr.lats.max())
    stations = []
    for i in range(config.station_count):
        lat = rng.uniform(lat_lo, lat_hi)
        lon = rng.uniform(0.0, 360.0)
        obs = {}
        for name in hr.channel_names:
            noise = rng.normal(0.0, config.obs_noise_std) if config.obs_noise_std > 0 else 0.0
            obs[name] = sample_at(hr, lat, lon, name) + noise
        stations.append(Station(f"st{i:04d}", lat, lon, obs))
    return StationSet(tuple(stations))


@dataclass(frozen=True)
class SampleTriple:
    hr: GridField
    condition: GridField
    lr: GridField
    stations: StationSet


def generate_sample(config: SynthConfig, sample_index: int) -> SampleTriple:
    hr = generate_field(config, sample_index)
    return SampleTriple(
        hr=hr,
        condition=derive_condition(hr, config, sample_index),
        lr=degrade(hr, config.scale_factor),
        stations=sample_stations(hr, config, sample_index),
    )


def write_dataset(config: SynthConfig, out_dir: str | Path) -> list[dict]:
    """Write n_samples triples as containers + station CSVs; returns the index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i in range(config.n_samples):
        triple = generate_sample(config, i)
        entry = {
            "index": i,
            "hr": f"hr_{i:05d}.npz",
            "condition": f"cond_{i:05d}.npz",
            "lr": f"lr_{i:05d}.npz",
            "stations": f"stations_{i:05d}.csv",
        }
        save_grid(triple.hr, out / entry["hr"])
        save_grid(triple.condition, out / entry["condition"])
        save_grid(triple.lr, out / entry["lr"])
        save_stations(triple.stations, out / entry["stations"], list(triple.hr.channel_names))
        index.append(entry)
    return index
