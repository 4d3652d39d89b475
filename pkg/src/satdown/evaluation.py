"""Station-level and grid-level metrics, interpolation baselines, ablations, reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .errors import ConfigError, OutOfDomainError, ValidationError
from .grid import GridField, StationSet, resize, sample_at
from .sampler import (
    DistanceConfig,
    GuidanceConfig,
    SampleDetails,
    ddim_sample,
    hr_coords_from_lr,
    prepare_station_targets,
    sample,
)


@dataclass(frozen=True)
class VariableMetrics:
    mse: float
    mae: float
    n_stations: int


@dataclass
class MetricReport:
    method: str
    station: dict[str, VariableMetrics]
    grid_mse: dict[str, float] | None = None
    manifest: dict = field(default_factory=dict)
    # Rendering extras: one representative field and per-station MAE detail.
    sample_field: GridField | None = None
    station_detail: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)

    def __post_init__(self):
        for name, m in self.station.items():
            if m.mse < 0 or m.mae < 0:
                raise ValidationError(f"negative metric for {name}")


def station_residuals(
    field_: GridField, stations: StationSet, variables: tuple[str, ...] | None = None
) -> dict[str, list[tuple[float, float, float]]]:
    """Per-variable (lat, lon, residual) for stations inside the field domain."""
    names = variables if variables is not None else field_.channel_names
    for name in names:
        if name not in field_.channel_names:
            raise ValidationError(f"variable {name!r} absent from field")
    out: dict[str, list[tuple[float, float, float]]] = {name: [] for name in names}
    for s in stations:
        for name in names:
            if name not in s.observations:
                continue
            try:
                pred = sample_at(field_, s.lat, s.lon, name)
            except OutOfDomainError:
                continue
            out[name].append((s.lat, s.lon, pred - s.observations[name]))
    return out


def station_metrics(
    field_: GridField,
    stations: StationSet,
    variables: tuple[str, ...] | None = None,
    method: str = "field",
    manifest: dict | None = None,
) -> MetricReport:
    """MSE/MAE of bilinear field samples against observations, physical units."""
    residuals = station_residuals(field_, stations, variables)
    metrics = {}
    detail = {}
    for name, rows in residuals.items():
        r = np.array([x[2] for x in rows], dtype=np.float64)
        if r.size:
            metrics[name] = VariableMetrics(float(np.mean(r**2)), float(np.mean(np.abs(r))), r.size)
        else:
            metrics[name] = VariableMetrics(0.0, 0.0, 0)
        detail[name] = [(lat, lon, abs(res)) for lat, lon, res in rows]
    return MetricReport(
        method=method,
        station=metrics,
        manifest=manifest or {},
        sample_field=field_,
        station_detail=detail,
    )


def pooled_station_metrics(
    pairs: list[tuple[GridField, StationSet]],
    variables: tuple[str, ...] | None = None,
    method: str = "field",
    manifest: dict | None = None,
) -> MetricReport:
    """station_metrics with residuals pooled across several (field, stations) pairs."""
    pooled: dict[str, list[tuple[float, float, float]]] = {}
    for f, st in pairs:
        for name, rows in station_residuals(f, st, variables).items():
            pooled.setdefault(name, []).extend(rows)
    metrics, detail = {}, {}
    for name, rows in pooled.items():
        r = np.array([x[2] for x in rows], dtype=np.float64)
        metrics[name] = VariableMetrics(float(np.mean(r**2)), float(np.mean(np.abs(r))), r.size)
        detail[name] = [(lat, lon, abs(res)) for lat, lon, res in rows]
    return MetricReport(
        method=method,
        station=metrics,
        manifest=manifest or {},
        sample_field=pairs[0][0] if pairs else None,
        station_detail=detail,
    )


def grid_mse(field_: GridField, truth: GridField) -> dict[str, float]:
    if field_.shape != truth.shape:
        raise ValidationError(f"shape mismatch {field_.shape} vs {truth.shape}")
    out = {}
    for i, name in enumerate(truth.channel_names):
        out[name] = float(np.mean((field_.values[i] - truth.values[i]) ** 2))
    return out


def baseline_interpolate(z: GridField, method: str, out_size: tuple[int, int]) -> GridField:
    """Interpolation baseline: resize z to out_size, coordinates aligned with the
    fine grid whose block means reproduce z's coordinates."""
    out_h, out_w = out_size
    resized = resize(z, out_h, out_w, method)
    if out_h % z.shape[1] == 0 and out_w % z.shape[2] == 0:
        # Re-interpolate onto the block-inverse grid so baselines and guided
        # samples share coordinates (spline extrapolates the half-cell fringe).
        from scipy.interpolate import RectBivariateSpline

        k = 1 if method == "bilinear" else 3
        lats_asc = z.lats[::-1] if z.lats[0] > z.lats[-1] else z.lats
        vals = z.values[:, ::-1, :] if z.lats[0] > z.lats[-1] else z.values
        new_lats = hr_coords_from_lr(z.lats, out_h // z.shape[1])
        new_lons = hr_coords_from_lr(z.lons, out_w // z.shape[2])
        new_lats_asc = new_lats[::-1] if new_lats[0] > new_lats[-1] else new_lats
        out = np.empty((z.shape[0], out_h, out_w))
        for ci in range(z.shape[0]):
            spline = RectBivariateSpline(lats_asc, z.lons, vals[ci].astype(np.float64), kx=k, ky=k)
            out[ci] = spline(new_lats_asc, new_lons)
        if new_lats[0] > new_lats[-1]:
            out = out[:, ::-1, :]
        return GridField(
            values=out.astype(np.float32),
            lats=new_lats,
            lons=new_lons,
            channels=z.channels,
            timestamp=z.timestamp,
            periodic_lon=z.periodic_lon,
        )
    return resized


@dataclass
class EvalCase:
    """One held-out benchmark field with its guidance inputs and ground truth."""

    lr: GridField
    condition: GridField
    hr_truth: GridField
    guidance_stations: StationSet
    eval_stations: StationSet


def split_stations(stations: StationSet, seed: int) -> tuple[StationSet, StationSet]:
    """50/50 guidance/evaluation split; the two id sets are asserted disjoint."""
    guidance, heldout = stations.split(0.5, seed)
    g_ids = {s.station_id for s in guidance}
    e_ids = {s.station_id for s in heldout}
    if g_ids & e_ids:
        raise ValidationError("guidance and evaluation stations overlap")
    return guidance, heldout


@dataclass
class AblationArm:
    name: str
    checkpoint: str | Path
    s: float = 1.0
    l: float = 0.0
    w_grid: float = 1.0
    w_station: float = 0.0
    ddim_steps: int | None = None
    condition_zeroed: bool = False
    condition_channels: tuple[str, ...] | None = None
    kernel_size: int = 9


def _arm_condition(case: EvalCase, arm: AblationArm) -> GridField | None:
    if arm.condition_zeroed:
        return None
    cond = case.condition
    if arm.condition_channels is not None:
        keep = set(arm.condition_channels)
        unknown = keep - set(cond.channel_names)
        if unknown:
            raise ConfigError(f"unknown condition channels {sorted(unknown)}")
        vals = cond.values.copy()
        for i, name in enumerate(cond.channel_names):
            if name not in keep:
                vals[i] = 0.0
        cond = cond.with_values(vals)
    return cond


def run_arm(
    arm: AblationArm, cases: list[EvalCase], seed: int = 0
) -> tuple[MetricReport, list[GridField]]:
    """Sample every case under one arm and pool station metrics and grid MSE."""
    ckpt_path = Path(arm.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"arm {arm.name!r}: missing checkpoint {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    gcfg = GuidanceConfig(
        schedule=ckpt.schedule(), s=arm.s, l=arm.l,
        ddim_steps=arm.ddim_steps, kernel_size=arm.kernel_size,
    )
    fields = []
    pairs = []
    grid_acc: dict[str, list[float]] = {}
    for i, case in enumerate(cases):
        out_size = case.hr_truth.shape[1:]
        stations = None
        if arm.w_station > 0:
            stations = prepare_station_targets(case.guidance_stations, case.lr, ckpt, out_size)
        dcfg = DistanceConfig(arm.w_grid, arm.w_station, stations)
        cond = _arm_condition(case, arm)
        if arm.ddim_steps:
            out = ddim_sample(case.lr, cond, ckpt, gcfg, dcfg, out_size, arm.ddim_steps, seed=seed + i)
        else:
            out = sample(case.lr, cond, ckpt, gcfg, dcfg, out_size, seed=seed + i)
        fields.append(out)
        pairs.append((out, case.eval_stations))
        for name, v in grid_mse(out, case.hr_truth).items():
            grid_acc.setdefault(name, []).append(v)
    report = pooled_station_metrics(
        pairs,
        method=arm.name,
        manifest={"seed": seed, "checkpoint": str(ckpt_path), "arm": arm.name},
    )
    report.grid_mse = {name: float(np.mean(v)) for name, v in grid_acc.items()}
    return report, fields


def run_ablation(arms: list[AblationArm], cases: list[EvalCase], seed: int = 0) -> list[MetricReport]:
    """One MetricReport per arm, all arms sharing seeds and cases."""
    return [run_arm(arm, cases, seed)[0] for arm in arms]


# --- report rendering -------------------------------------------------------


def render_report(reports: list[MetricReport], out_dir: str | Path) -> list[Path]:
    """CSV metrics table, per-variable heatmaps, MAE-colored station scatter, manifest."""
    if not reports:
        raise ValidationError("render_report: no reports")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out / "metrics.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "variable", "mse", "mae", "n_stations", "seed", "checkpoint"])
        for rep in reports:
            for name, m in sorted(rep.station.items()):
                writer.writerow(
                    [
                        rep.method,
                        name,
                        f"{m.mse:.10g}",
                        f"{m.mae:.10g}",
                        m.n_stations,
                        rep.manifest.get("seed", ""),
                        rep.manifest.get("checkpoint", ""),
                    ]
                )
    written.append(csv_path)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for rep in reports:
        safe = rep.method.replace("/", "_").replace(" ", "_")
        if rep.sample_field is not None:
            for i, name in enumerate(rep.sample_field.channel_names):
                fig, ax = plt.subplots(figsize=(5, 3.2))
                im = ax.imshow(rep.sample_field.values[i], cmap="viridis")
                ax.set_title(f"{rep.method}: {name}")
                ax.set_axis_off()
                fig.colorbar(im, ax=ax, shrink=0.85)
                p = out / f"heatmap_{safe}_{name}.png"
                fig.savefig(p, dpi=110)
                plt.close(fig)
                written.append(p)
        for name, rows in rep.station_detail.items():
            if not rows:
                continue
            lats = [r[0] for r in rows]
            lons = [r[1] for r in rows]
            maes = [r[2] for r in rows]
            fig, ax = plt.subplots(figsize=(5, 3.2))
            sc = ax.scatter(lons, lats, c=maes, cmap="magma", vmin=0.0, vmax=max(maes), s=14)
            ax.set_title(f"{rep.method}: station MAE ({name})")
            ax.set_xlabel("lon")
            ax.set_ylabel("lat")
            fig.colorbar(sc, ax=ax, shrink=0.85)
            p = out / f"stations_{safe}_{name}.png"
            fig.savefig(p, dpi=110)
            plt.close(fig)
            written.append(p)

    manifest = {
        "reports": [
            {
                "method": rep.method,
                "station": {
                    name: {"mse": m.mse, "mae": m.mae, "n_stations": m.n_stations}
                    for name, m in sorted(rep.station.items())
                },
                "grid_mse": rep.grid_mse,
                "manifest": rep.manifest,
            }
            for rep in reports
        ]
    }
    man_path = out / "report.json"
    man_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written.append(man_path)
    return written
