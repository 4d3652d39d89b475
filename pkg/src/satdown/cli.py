"""Operator surface: synth, pretrain-encoder, train, sample, evaluate, report.

Exit codes: 0 success, 2 config error, 3 missing prerequisite artifact,
4 runtime/numerical failure. SATDOWN_DATA_ROOT sets the default data root.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conditioning import EncoderConfig, PretrainConfig, pretrain_encoder
from .config import RunConfig, config_hash, load_config
from .containers import load_container, save_container
from .denoiser import DenoiserConfig, TrainConfig, train
from .diffusion import make_schedule
from .errors import ConfigError, FormatError, MissingArtifactError, SatdownError, ValidationError
from .evaluation import (
    AblationArm,
    EvalCase,
    baseline_interpolate,
    grid_mse,
    pooled_station_metrics,
    render_report,
    run_arm,
    split_stations,
)
from .grid import (
    GridField,
    NormStats,
    compute_norm_stats,
    load_grid,
    load_stations,
    save_grid,
)
from .patches import make_layout, patched_sample
from .sampler import (
    DistanceConfig,
    GuidanceConfig,
    SampleDetails,
    ddim_sample,
    prepare_station_targets,
    sample,
)
from .synthetic import SynthConfig, write_dataset

log = logging.getLogger("satdown")


def _data_root(args, config: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if config.data_root:
        return Path(config.data_root)
    return Path(os.environ.get("SATDOWN_DATA_ROOT", "runs"))


def _write_manifest(path: Path, command: str, config: RunConfig, extra: dict) -> None:
    doc = {
        "command": command,
        "version": f"satdown-{__version__}",
        "config_hash": config_hash(config),
        # The one non-deterministic field; everything else is reproducible.
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_dataset(data_dir: Path) -> tuple[dict, list[dict]]:
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        raise MissingArtifactError(f"dataset manifest not found: {manifest}")
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    return doc, doc["samples"]


def cmd_synth(args) -> int:
    config = load_config(args.config)
    synth_kwargs = dataclasses.asdict(config.synth)
    if args.seed is not None:
        synth_kwargs["seed"] = args.seed
    scfg = SynthConfig(**synth_kwargs)
    out_dir = _data_root(args, config) / "dataset" if args.out is None else Path(args.out)
    index = write_dataset(scfg, out_dir)
    _write_manifest(
        out_dir / "manifest.json",
        "synth",
        config,
        {"synth": dataclasses.asdict(scfg), "samples": index},
    )
    log.info("wrote %d samples to %s", len(index), out_dir)
    return 0


def _load_conditions(data_dir: Path, entries: list[dict]) -> tuple[np.ndarray, GridField]:
    conds = [load_grid(data_dir / e["condition"]) for e in entries]
    return np.stack([c.values for c in conds]), conds[0]


def cmd_pretrain_encoder(args) -> int:
    config = load_config(args.config)
    data_dir = Path(args.data) if args.data else _data_root(args, config) / "dataset"
    _, entries = _read_dataset(data_dir)
    n_eval = config.evaluate.n_fields
    train_entries = entries[: max(1, len(entries) - n_eval)]
    cond_values, cond0 = _load_conditions(data_dir, train_entries)

    names = cond0.channel_names
    flat = cond_values.transpose(1, 0, 2, 3).reshape(len(names), -1)
    stats = NormStats(names, flat.mean(axis=1), flat.std(axis=1))
    normed = (cond_values - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]

    seed = args.seed if args.seed is not None else config.seed
    enc_cfg = EncoderConfig(
        in_channels=len(names), stride=config.encoder.stride, hidden=config.encoder.hidden
    )
    result = pretrain_encoder(
        normed.astype(np.float32),
        enc_cfg,
        PretrainConfig(
            epochs=config.encoder.epochs,
            batch_size=config.encoder.batch_size,
            lr=config.encoder.lr,
            seed=seed,
            holdout_fraction=config.encoder.holdout_fraction,
        ),
    )
    out_path = Path(args.out) if args.out else _data_root(args, config) / "encoder.npz"
    arrays = {}
    for key, val in result.encoder.state_dict().items():
        arrays[f"encoder/{key}"] = val.numpy().astype(np.float32)
    for key, val in result.decoder.state_dict().items():
        arrays[f"decoder/{key}"] = val.numpy().astype(np.float32)
    arrays["norm/cond_mean"] = stats.mean
    arrays["norm/cond_std"] = stats.std
    save_container(
        out_path,
        arrays,
        {
            "kind": "satdown-encoder",
            "encoder_config": dataclasses.asdict(enc_cfg),
            "cond_channels": list(names),
            "epochs": config.encoder.epochs,
            "holdout_mse": result.holdout_mse,
            "holdout_variance": result.holdout_variance,
        },
    )
    _write_manifest(
        Path(str(out_path) + ".manifest.json"),
        "pretrain-encoder",
        config,
        {"encoder": str(out_path), "holdout_mse": result.holdout_mse},
    )
    log.info("encoder holdout MSE %.5f (var %.5f)", result.holdout_mse, result.holdout_variance)
    return 0


def _load_encoder_artifact(path: Path):
    if not path.exists():
        raise MissingArtifactError(f"encoder artifact not found: {path}")
    arrays, meta = load_container(path)
    if meta.get("kind") != "satdown-encoder":
        raise FormatError(f"{path}: not an encoder artifact")
    enc_cfg = EncoderConfig(**meta["encoder_config"])
    state = {k.split("/", 1)[1]: arrays[k] for k in arrays if k.startswith("encoder/")}
    stats = NormStats(tuple(meta["cond_channels"]), arrays["norm/cond_mean"], arrays["norm/cond_std"])
    return enc_cfg, state, stats


def cmd_train(args) -> int:
    import torch

    config = load_config(args.config)
    data_dir = Path(args.data) if args.data else _data_root(args, config) / "dataset"
    _, entries = _read_dataset(data_dir)
    n_eval = config.evaluate.n_fields
    train_entries = entries[: max(1, len(entries) - n_eval)]

    enc_path = Path(args.encoder) if args.encoder else _data_root(args, config) / "encoder.npz"
    enc_cfg, enc_state, cond_stats = _load_encoder_artifact(enc_path)
    from .conditioning import ConditionEncoder

    encoder = ConditionEncoder(enc_cfg)
    encoder.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in enc_state.items()})
    encoder.eval()

    hr_fields = [load_grid(data_dir / e["hr"]) for e in train_entries]
    target_stats = compute_norm_stats(hr_fields)
    targets = np.stack(
        [
            (f.values - target_stats.mean[:, None, None]) / target_stats.std[:, None, None]
            for f in hr_fields
        ]
    )
    cond_values, _ = _load_conditions(data_dir, train_entries)
    conds = (cond_values - cond_stats.mean[None, :, None, None]) / cond_stats.std[
        None, :, None, None
    ]

    seed = args.seed if args.seed is not None else config.seed
    schedule = make_schedule(config.schedule.T, config.schedule.beta_1, config.schedule.beta_T)
    den_cfg = DenoiserConfig(
        in_channels=targets.shape[1],
        base_width=config.denoiser.base_width,
        channel_mults=config.denoiser.channel_mults,
        res_blocks_per_level=config.denoiser.res_blocks_per_level,
        attn_levels=config.denoiser.attn_levels,
        attn_dim=config.denoiser.attn_dim,
        time_dim=config.denoiser.time_dim,
    )
    tcfg = TrainConfig(
        steps=config.train.steps,
        batch_size=config.train.batch_size,
        lr=config.train.lr,
        ema_decay=config.train.ema_decay,
        grad_clip=config.train.grad_clip,
        seed=seed,
        condition_zeroed=config.train.condition_zeroed,
        train_encoder=config.train.train_encoder,
    )
    result = train(
        targets.astype(np.float32), conds.astype(np.float32), schedule, encoder, den_cfg, tcfg
    )

    ckpt = Checkpoint(
        denoiser_config=den_cfg,
        denoiser_state={k: v.numpy().astype(np.float32) for k, v in result.model.state_dict().items()},
        ema_state={k: v.numpy().astype(np.float32) for k, v in result.ema_state.items()},
        encoder_config=enc_cfg,
        encoder_state={k: v.numpy().astype(np.float32) for k, v in encoder.state_dict().items()},
        schedule_T=config.schedule.T,
        schedule_beta_1=config.schedule.beta_1,
        schedule_beta_T=config.schedule.beta_T,
        target_stats=target_stats,
        cond_stats=cond_stats,
        meta={
            "steps": tcfg.steps,
            "seed": seed,
            "condition_zeroed": tcfg.condition_zeroed,
            "final_loss": result.losses[-1] if result.losses else None,
        },
    )
    out_path = Path(args.out) if args.out else _data_root(args, config) / "checkpoint.npz"
    save_checkpoint(ckpt, out_path)
    _write_manifest(
        Path(str(out_path) + ".manifest.json"),
        "train",
        config,
        {"checkpoint": str(out_path), "steps": tcfg.steps, "condition_zeroed": tcfg.condition_zeroed},
    )
    log.info("checkpoint written to %s", out_path)
    return 0


def cmd_sample(args) -> int:
    config = load_config(args.config)
    sec = config.sample
    s = args.s if args.s is not None else sec.s
    l = args.l if args.l is not None else sec.l
    w_grid = args.w_grid if args.w_grid is not None else sec.w_grid
    w_station = args.w_station if args.w_station is not None else sec.w_station
    ddim_steps = args.ddim if args.ddim is not None else sec.ddim_steps
    seed = args.seed if args.seed is not None else config.seed

    ckpt_path = Path(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    z = load_grid(args.lr_input)
    condition = load_grid(args.condition) if args.condition else None

    if args.out_size:
        out_size = (args.out_size[0], args.out_size[1])
    else:
        out_size = (z.shape[1] * sec.out_scale, z.shape[2] * sec.out_scale)

    stations = None
    if w_station > 0:
        if not args.stations:
            raise ConfigError("w_station > 0 requires --stations CSV")
        station_set = load_stations(args.stations)
        stations = prepare_station_targets(station_set, z, ckpt, out_size)
    dcfg = DistanceConfig(w_grid=w_grid, w_station=w_station, stations=stations)
    gcfg = GuidanceConfig(
        schedule=ckpt.schedule(), s=s, l=l, ddim_steps=ddim_steps, kernel_size=sec.kernel_size
    )

    patch_size = args.patch_size or sec.patch_size
    details = SampleDetails(kernel=None)
    if patch_size:
        stride = args.patch_stride or sec.patch_stride or min(patch_size)
        layout = make_layout(
            out_size[0], out_size[1], tuple(patch_size), stride,
            align=out_size[0] // z.shape[1],
        )
        field = patched_sample(
            z, condition, ckpt, layout, gcfg, dcfg, seed=seed,
            strict_paper_mode=sec.strict_paper_mode, details=details,
        )
        mode = "patched"
    elif ddim_steps:
        field = ddim_sample(
            z, condition, ckpt, gcfg, dcfg, out_size, steps=ddim_steps, seed=seed, details=details
        )
        mode = "ddim"
    else:
        field = sample(z, condition, ckpt, gcfg, dcfg, out_size, seed=seed, details=details)
        mode = "ancestral"

    out_path = Path(args.out) if args.out else Path("sample_out.npz")
    save_grid(field, out_path)
    _write_manifest(
        Path(str(out_path) + ".manifest.json"),
        "sample",
        config,
        {
            "output": str(out_path),
            "checkpoint": str(ckpt_path),
            "mode": mode,
            "guidance": "unguided" if (s == 0 and l == 0) else "guided",
            "s": s,
            "l": l,
            "w_grid": w_grid,
            "w_station": w_station,
            "seed": seed,
            "denoiser_calls": details.denoiser_calls,
        },
    )
    log.info("sample written to %s (%s)", out_path, mode)
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    data_dir = Path(args.data) if args.data else _data_root(args, config) / "dataset"
    manifest, entries = _read_dataset(data_dir)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise MissingArtifactError(f"checkpoint not found: {ckpt_path}")
    n_eval = min(config.evaluate.n_fields, len(entries))
    eval_entries = entries[-n_eval:]
    seed = args.seed if args.seed is not None else config.seed

    cases = []
    for e in eval_entries:
        hr = load_grid(data_dir / e["hr"])
        stations = load_stations(data_dir / e["stations"])
        guidance, heldout = split_stations(stations, config.evaluate.station_split_seed)
        cases.append(
            EvalCase(
                lr=load_grid(data_dir / e["lr"]),
                condition=load_grid(data_dir / e["condition"]),
                hr_truth=hr,
                guidance_stations=guidance,
                eval_stations=heldout,
            )
        )

    sec = config.sample
    arm = AblationArm(
        name="guided-diffusion",
        checkpoint=ckpt_path,
        s=sec.s,
        l=sec.l,
        w_grid=sec.w_grid,
        w_station=sec.w_station,
        ddim_steps=sec.ddim_steps,
        kernel_size=sec.kernel_size,
    )
    reports = [run_arm(arm, cases, seed)[0]]

    for method in config.evaluate.baselines:
        pairs = []
        grid_acc: dict[str, list[float]] = {}
        for case in cases:
            out = baseline_interpolate(case.lr, method, case.hr_truth.shape[1:])
            pairs.append((out, case.eval_stations))
            for name, v in grid_mse(out, case.hr_truth).items():
                grid_acc.setdefault(name, []).append(v)
        rep = pooled_station_metrics(pairs, method=method, manifest={"seed": seed, "checkpoint": ""})
        rep.grid_mse = {k: float(np.mean(v)) for k, v in grid_acc.items()}
        reports.append(rep)

    out_dir = Path(args.out) if args.out else _data_root(args, config) / "evaluation"
    written = render_report(reports, out_dir)
    _write_manifest(
        out_dir / "manifest.json",
        "evaluate",
        config,
        {
            "checkpoint": str(ckpt_path),
            "n_fields": n_eval,
            "outputs": [str(p) for p in written],
            "seed": seed,
        },
    )
    log.info("evaluation written to %s", out_dir)
    return 0


def cmd_report(args) -> int:
    from .evaluation import MetricReport, VariableMetrics

    config = load_config(args.config)
    reports = []
    for path in args.reports:
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(f"report not found: {p}")
        doc = json.loads(p.read_text(encoding="utf-8"))
        for entry in doc["reports"]:
            reports.append(
                MetricReport(
                    method=entry["method"],
                    station={
                        name: VariableMetrics(m["mse"], m["mae"], m["n_stations"])
                        for name, m in entry["station"].items()
                    },
                    grid_mse=entry.get("grid_mse"),
                    manifest=entry.get("manifest", {}),
                )
            )
    out_dir = Path(args.out) if args.out else Path("report_out")
    written = render_report(reports, out_dir)
    _write_manifest(
        out_dir / "manifest.json", "report", config, {"outputs": [str(p) for p in written]}
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satdown", description=__doc__)
    parser.add_argument("--version", action="version", version=f"satdown {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration YAML")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output path/directory")

    p = sub.add_parser("synth", help="generate a synthetic coupled dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain-encoder", help="reconstruction-pretrain the condition encoder")
    common(p)
    p.add_argument("--data", help="dataset directory (default <data_root>/dataset)")
    p.set_defaults(func=cmd_pretrain_encoder)

    p = sub.add_parser("train", help="train the conditional denoiser")
    common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--encoder", help="pretrained encoder artifact")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="guided sampling from LR guidance + condition")
    common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint container")
    p.add_argument("--lr-input", required=True, help="low-resolution guidance container")
    p.add_argument("--condition", help="condition container (omit for unconditional)")
    p.add_argument("--stations", help="guidance station CSV")
    p.add_argument("--out-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--s", type=float, help="guidance scale")
    p.add_argument("--l", type=float, help="kernel learning rate")
    p.add_argument("--w-grid", type=float, dest="w_grid")
    p.add_argument("--w-station", type=float, dest="w_station")
    p.add_argument("--ddim", type=int, help="use DDIM with this many steps")
    p.add_argument("--patch-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--patch-stride", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="sample held-out fields and report metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-render metric tables from report JSON files")
    common(p)
    p.add_argument("reports", nargs="+", help="report.json files to merge")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except SatdownError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
