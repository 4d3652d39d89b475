"""Gridded fields, station records, and the point/resampling primitives.

Canonical coordinate convention: latitudes descending (90 → −90), longitudes
ascending in [0, 360). Loaders reorder stored arrays onto this canon; values
are immutable after construction (arrays are copied and marked read-only).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .containers import load_container, save_container
from .errors import FormatError, MaskedValueError, OutOfDomainError, ValidationError


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _strictly_monotonic(a: np.ndarray) -> bool:
    if a.size < 2:
        return True
    d = np.diff(a)
    return bool(np.all(d > 0) or np.all(d < 0))


@dataclass(frozen=True)
class GridField:
    """A named multi-channel lat/lon raster.

    values: float32 [C, H, W]; lats [H] and lons [W] in degrees, strictly
    monotonic; mask (optional) [H, W] with True = valid cell.
    """

    values: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    channels: tuple[tuple[str, str], ...]  # (name, unit)
    timestamp: datetime
    mask: np.ndarray | None = None
    periodic_lon: bool = True

    def __post_init__(self):
        values = _readonly(np.asarray(self.values, dtype=np.float32))
        lats = _readonly(np.asarray(self.lats, dtype=np.float64))
        lons = _readonly(np.asarray(self.lons, dtype=np.float64))
        channels = tuple((str(n), str(u)) for n, u in self.channels)
        mask = self.mask
        if mask is not None:
            mask = _readonly(np.asarray(mask, dtype=bool))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "lons", lons)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "mask", mask)

        if values.ndim != 3:
            raise ValidationError(f"values must be [C, H, W], got shape {values.shape}")
        c, h, w = values.shape
        if (c, h, w) != (len(channels), lats.size, lons.size):
            raise ValidationError(
                f"shape mismatch: values {values.shape} vs "
                f"{len(channels)} channels, {lats.size} lats, {lons.size} lons"
            )
        if lats.size < 1 or not _strictly_monotonic(lats):
            raise ValidationError("lats must be strictly monotonic")
        if lons.size < 1 or not _strictly_monotonic(lons):
            raise ValidationError("lons must be strictly monotonic")
        if mask is not None:
            if mask.shape != (h, w):
                raise ValidationError(f"mask shape {mask.shape} != {(h, w)}")
            if not np.all(np.isfinite(values[:, mask])):
                raise ValidationError("unmasked cells must be finite")
        elif not np.all(np.isfinite(values)):
            raise ValidationError("values must be finite when no mask is given")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.channels)

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise ValidationError(f"channel {name!r} not in {self.channel_names}") from None

    def with_values(self, values: np.ndarray) -> "GridField":
        return replace(self, values=values)


@dataclass(frozen=True)
class Station:
    station_id: str
    lat: float
    lon: float
    observations: dict[str, float]


@dataclass(frozen=True)
class StationSet:
    """Sparse point observations. lon is normalized to [0, 360)."""

    stations: tuple[Station, ...]

    def __post_init__(self):
        stations = tuple(
            Station(s.station_id, float(s.lat), float(s.lon) % 360.0, dict(s.observations))
            for s in self.stations
        )
        object.__setattr__(self, "stations", stations)
        ids = [s.station_id for s in stations]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate station_id in StationSet")
        for s in stations:
            if not -90.0 <= s.lat <= 90.0:
                raise ValidationError(f"station {s.station_id}: lat {s.lat} outside [-90, 90]")

    def __len__(self) -> int:
        return len(self.stations)

    def __iter__(self):
        return iter(self.stations)

    @property
    def variables(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for s in self.stations:
            for v in s.observations:
                seen.setdefault(v, None)
        return tuple(seen)

    def split(self, fraction: float, seed: int) -> tuple["StationSet", "StationSet"]:
        """Deterministically split into (first, second) by shuffled station id."""
        rng = np.random.default_rng([int(seed), 0x5147])
        order = rng.permutation(len(self.stations))
        n_first = int(round(fraction * len(self.stations)))
        first = tuple(self.stations[i] for i in sorted(order[:n_first]))
        second = tuple(self.stations[i] for i in sorted(order[n_first:]))
        return StationSet(first), StationSet(second)


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics from a training split."""

    channels: tuple[str, ...]
    mean: np.ndarray  # [C]
    std: np.ndarray  # [C]

    def __post_init__(self):
        mean = _readonly(np.asarray(self.mean, dtype=np.float64))
        std = _readonly(np.asarray(self.std, dtype=np.float64))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.shape != (len(self.channels),) or std.shape != (len(self.channels),):
            raise ValidationError("NormStats mean/std must be [C] matching channels")
        if not np.all(std > 0):
            raise ValidationError("NormStats std must be > 0 for every channel")


def compute_norm_stats(fields: list[GridField]) -> NormStats:
    """Pooled per-channel mean/std over a list of same-channel fields."""
    if not fields:
        raise ValidationError("compute_norm_stats: empty field list")
    names = fields[0].channel_names
    for f in fields:
        if f.channel_names != names:
            raise ValidationError("compute_norm_stats: channel mismatch across fields")
    stacked = np.concatenate([f.values.reshape(len(names), -1) for f in fields], axis=1)
    return NormStats(names, stacked.mean(axis=1), stacked.std(axis=1))


def _check_stats(field: GridField, stats: NormStats) -> None:
    if field.channel_names != stats.channels:
        raise ValidationError(
            f"stats channels {stats.channels} do not match field {field.channel_names}"
        )


def normalize(field: GridField, stats: NormStats) -> GridField:
    _check_stats(field, stats)
    v = (field.values - stats.mean[:, None, None]) / stats.std[:, None, None]
    return field.with_values(v.astype(np.float32))


def denormalize(field: GridField, stats: NormStats) -> GridField:
    _check_stats(field, stats)
    v = field.values * stats.std[:, None, None] + stats.mean[:, None, None]
    return field.with_values(v.astype(np.float32))


def fractional_index(
    lats: np.ndarray,
    lons: np.ndarray,
    lat: float,
    lon: float,
    periodic_lon: bool = True,
) -> tuple[float, float]:
    """Map (lat, lon) to fractional (row, col) on the grid.

    Rows interpolate between neighbouring lat cells; the returned row is in
    [0, H-1]. Columns are in [0, W-1] for interior queries; on a periodic
    grid, queries in the wrap segment between the last and first columns
    return col in (W-1, W), with col == W identified with col == 0.
    """
    lat = float(lat)
    lon = float(lon)
    if lats.size < 2 or lons.size < 2:
        raise ValidationError("point sampling needs a grid of at least 2x2")
    lo, hi = (lats[-1], lats[0]) if lats[0] > lats[-1] else (lats[0], lats[-1])
    if not lo <= lat <= hi:
        raise OutOfDomainError(f"lat {lat} outside span [{lo}, {hi}]")
    # np.interp needs ascending x; map onto ascending index then flip back.
    if lats[0] > lats[-1]:
        row = (lats.size - 1) - float(np.interp(lat, lats[::-1], np.arange(lats.size)))
    else:
        row = float(np.interp(lat, lats, np.arange(lats.size)))

    if periodic_lon:
        period = 360.0
        rel = (lon - lons[0]) % period
        span = lons[-1] - lons[0]
        if rel <= span:
            col = float(np.interp(rel + lons[0], lons, np.arange(lons.size)))
        else:
            # Between the last and first column (wrap cell).
            gap = period - span
            col = (lons.size - 1) + (rel - span) / gap
    else:
        if not lons[0] <= lon <= lons[-1]:
            raise OutOfDomainError(f"lon {lon} outside span [{lons[0]}, {lons[-1]}]")
        col = float(np.interp(lon, lons, np.arange(lons.size)))
    return row, col


def sample_at(field: GridField, lat: float, lon: float, channel: str) -> float:
    """Bilinear point sample of one channel; linear in the field values."""
    c = field.channel_index(channel)
    row, col = fractional_index(field.lats, field.lons, lat, lon, field.periodic_lon)
    h, w = field.lats.size, field.lons.size
    r0 = min(int(math.floor(row)), h - 2)
    fr = row - r0
    c0 = int(math.floor(col))
    fc = col - c0
    if field.periodic_lon:
        c0 %= w
        c1 = (c0 + 1) % w
    else:
        c0 = min(c0, w - 2)
        fc = col - c0
        c1 = c0 + 1
    r1 = r0 + 1
    if field.mask is not None:
        stencil = field.mask[[r0, r0, r1, r1], [c0, c1, c0, c1]]
        if not np.all(stencil):
            raise MaskedValueError(f"masked neighborhood at lat={lat}, lon={lon}")
    v = field.values[c]
    top = (1.0 - fc) * float(v[r0, c0]) + fc * float(v[r0, c1])
    bot = (1.0 - fc) * float(v[r1, c0]) + fc * float(v[r1, c1])
    return (1.0 - fr) * top + fr * bot


def resize(field: GridField, new_h: int, new_w: int, method: str = "bilinear") -> GridField:
    """Interpolate onto a linearly re-spanned lat/lon grid of the given size."""
    if new_h < 2 or new_w < 2:
        raise ValidationError("resize: new dims must be >= 2")
    if method not in ("bilinear", "bicubic"):
        raise ValidationError(f"resize: unknown method {method!r}")
    k = 1 if method == "bilinear" else 3
    lats, lons, values = field.lats, field.lons, field.values
    flip = lats[0] > lats[-1]
    lats_asc = lats[::-1] if flip else lats
    vals = values[:, ::-1, :] if flip else values

    new_lats_asc = np.linspace(lats_asc[0], lats_asc[-1], new_h)
    new_lons = np.linspace(lons[0], lons[-1], new_w)
    out = np.empty((values.shape[0], new_h, new_w), dtype=np.float64)
    for ci in range(values.shape[0]):
        spline = RectBivariateSpline(lats_asc, lons, vals[ci].astype(np.float64), kx=k, ky=k)
        out[ci] = spline(new_lats_asc, new_lons)
    if flip:
        out = out[:, ::-1, :]
        new_lats = new_lats_asc[::-1]
    else:
        new_lats = new_lats_asc
    return GridField(
        values=out.astype(np.float32),
        lats=new_lats,
        lons=new_lons,
        channels=field.channels,
        timestamp=field.timestamp,
        mask=None,
        periodic_lon=field.periodic_lon,
    )


def fill_masked(field: GridField) -> GridField:
    """Fill invalid cells with the nearest valid value; keeps the mask."""
    if field.mask is None or field.mask.all():
        return field
    if not field.mask.any():
        raise ValidationError("fill_masked: no valid cells to fill from")
    from scipy.ndimage import distance_transform_edt

    # Index of nearest valid cell for every invalid cell.
    _, (ri, ci) = distance_transform_edt(~field.mask, return_indices=True)
    filled = field.values[:, ri, ci]
    return field.with_values(filled)


# --- container I/O ---------------------------------------------------------


def save_grid(field: GridField, path: str | Path) -> None:
    arrays = {
        "values": field.values.astype(np.float32),
        "lats": field.lats.astype(np.float64),
        "lons": field.lons.astype(np.float64),
    }
    if field.mask is not None:
        arrays["mask"] = field.mask
    meta = {
        "channels": [[n, u] for n, u in field.channels],
        "timestamp": field.timestamp.astimezone(timezone.utc).isoformat(),
        "periodic_lon": field.periodic_lon,
    }
    save_container(path, arrays, meta)


def load_grid(path: str | Path) -> GridField:
    arrays, meta = load_container(path)
    for key in ("values", "lats", "lons"):
        if key not in arrays:
            raise FormatError(f"{path}: missing array {key!r}")
    try:
        channels = tuple((str(n), str(u)) for n, u in meta["channels"])
        timestamp = datetime.fromisoformat(meta["timestamp"])
        periodic = bool(meta.get("periodic_lon", True))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad metadata ({exc})") from exc

    values = arrays["values"]
    lats = arrays["lats"]
    lons = arrays["lons"]
    mask = arrays.get("mask")
    # Reorder onto the canon: lats descending, lons ascending.
    if lats.size >= 2 and lats[0] < lats[-1]:
        lats = lats[::-1]
        values = values[:, ::-1, :]
        mask = mask[::-1, :] if mask is not None else None
    if lons.size >= 2 and lons[0] > lons[-1]:
        lons = lons[::-1]
        values = values[:, :, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    return GridField(
        values=values,
        lats=lats,
        lons=lons,
        channels=channels,
        timestamp=timestamp,
        mask=mask,
        periodic_lon=periodic,
    )


# --- station CSV -----------------------------------------------------------

_REQUIRED_COLS = ("station_id", "lat", "lon")


def load_stations(path: str | Path) -> StationSet:
    """Read the station CSV: header station_id,lat,lon,<var...>; blanks = missing."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty station CSV") from None
        if tuple(header[:3]) != _REQUIRED_COLS:
            raise FormatError(
                f"{path}: header must start with {','.join(_REQUIRED_COLS)}, got {header[:3]}"
            )
        variables = header[3:]
        stations = []
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{i}: expected {len(header)} fields, got {len(row)}")
            try:
                lat = float(row[1])
                lon = float(row[2])
                obs = {v: float(x) for v, x in zip(variables, row[3:]) if x.strip() != ""}
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: non-numeric value ({exc})") from exc
            stations.append(Station(row[0], lat, lon, obs))
    return StationSet(tuple(stations))


def save_stations(stations: StationSet, path: str | Path, variables: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(variables) if variables is not None else list(stations.variables)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(_REQUIRED_COLS) + cols)
        for s in stations:
            row = [s.station_id, repr(s.lat), repr(s.lon)]
            row += [repr(s.observations[v]) if v in s.observations else "" for v in cols]
            writer.writerow(row)
