"""Unified checkpoint container: denoiser + EMA + encoder params and normalization stats."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .conditioning import ConditionEncoder, EncoderConfig
from .containers import load_container, save_container
from .denoiser import DenoiserConfig, UNetDenoiser
from .diffusion import NoiseSchedule, make_schedule
from .errors import FormatError, MissingArtifactError
from .grid import NormStats


@dataclass
class Checkpoint:
    denoiser_config: DenoiserConfig
    denoiser_state: dict[str, np.ndarray]
    ema_state: dict[str, np.ndarray]
    encoder_config: EncoderConfig
    encoder_state: dict[str, np.ndarray]
    schedule_T: int
    schedule_beta_1: float
    schedule_beta_T: float
    target_stats: NormStats
    cond_stats: NormStats
    meta: dict

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_T, self.schedule_beta_1, self.schedule_beta_T)

    def build_denoiser(self, ema: bool = True) -> UNetDenoiser:
        model = UNetDenoiser(self.denoiser_config)
        state = self.ema_state if ema else self.denoiser_state
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
        model.eval()
        return model

    def build_encoder(self) -> ConditionEncoder:
        enc = ConditionEncoder(self.encoder_config)
        enc.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.encoder_state.items()})
        enc.eval()
        return enc


def _state_to_arrays(state: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in state.items()}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix, state in (
        ("denoiser", ckpt.denoiser_state),
        ("ema", ckpt.ema_state),
        ("encoder", ckpt.encoder_state),
    ):
        for k, v in state.items():
            arrays[f"{prefix}/{k}"] = np.asarray(v, dtype=np.float32)
    arrays["norm/target_mean"] = ckpt.target_stats.mean
    arrays["norm/target_std"] = ckpt.target_stats.std
    arrays["norm/cond_mean"] = ckpt.cond_stats.mean
    arrays["norm/cond_std"] = ckpt.cond_stats.std
    meta = {
        "kind": "satdown-checkpoint",
        "schedule": {"T": ckpt.schedule_T, "beta_1": ckpt.schedule_beta_1, "beta_T": ckpt.schedule_beta_T},
        "denoiser_config": {
            "in_channels": ckpt.denoiser_config.in_channels,
            "base_width": ckpt.denoiser_config.base_width,
            "channel_mults": list(ckpt.denoiser_config.channel_mults),
            "res_blocks_per_level": ckpt.denoiser_config.res_blocks_per_level,
            "attn_levels": list(ckpt.denoiser_config.attn_levels),
            "attn_dim": ckpt.denoiser_config.attn_dim,
            "cond_channels": ckpt.denoiser_config.cond_channels,
            "time_dim": ckpt.denoiser_config.time_dim,
        },
        "encoder_config": {
            "in_channels": ckpt.encoder_config.in_channels,
            "stride": ckpt.encoder_config.stride,
            "hidden": ckpt.encoder_config.hidden,
        },
        "target_channels": list(ckpt.target_stats.channels),
        "cond_channels": list(ckpt.cond_stats.channels),
        "meta": ckpt.meta,
    }
    save_container(path, arrays, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    arrays, meta = load_container(path)
    if meta.get("kind") != "satdown-checkpoint":
        raise FormatError(f"{path}: not a checkpoint container")
    states: dict[str, dict[str, np.ndarray]] = {"denoiser": {}, "ema": {}, "encoder": {}}
    for key, arr in arrays.items():
        prefix, _, rest = key.partition("/")
        if prefix in states:
            states[prefix][rest] = arr
    dc = meta["denoiser_config"]
    ec = meta["encoder_config"]
    return Checkpoint(
        denoiser_config=DenoiserConfig(
            in_channels=dc["in_channels"],
            base_width=dc["base_width"],
            channel_mults=tuple(dc["channel_mults"]),
            res_blocks_per_level=dc["res_blocks_per_level"],
            attn_levels=tuple(dc["attn_levels"]),
            attn_dim=dc["attn_dim"],
            cond_channels=dc["cond_channels"],
            time_dim=dc["time_dim"],
        ),
        denoiser_state=states["denoiser"],
        ema_state=states["ema"],
        encoder_config=EncoderConfig(
            in_channels=ec["in_channels"], stride=ec["stride"], hidden=ec["hidden"]
        ),
        encoder_state=states["encoder"],
        schedule_T=meta["schedule"]["T"],
        schedule_beta_1=meta["schedule"]["beta_1"],
        schedule_beta_T=meta["schedule"]["beta_T"],
        target_stats=NormStats(
            tuple(meta["target_channels"]), arrays["norm/target_mean"], arrays["norm/target_std"]
        ),
        cond_stats=NormStats(
            tuple(meta["cond_channels"]), arrays["norm/cond_mean"], arrays["norm/cond_std"]
        ),
        meta=meta.get("meta", {}),
    )
