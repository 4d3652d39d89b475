"""Conditional noise-estimation UNet ε_θ(x_t, y', t) and its training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import FEATURE_CHANNELS, ConditionEncoder, CrossAttentionBlock
from .diffusion import NoiseSchedule, ema_update, training_loss
from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 4
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    res_blocks_per_level: int = 2
    attn_levels: tuple[int, ...] = (1, 2)  # two coarsest of three by default
    attn_dim: int = 64
    cond_channels: int = FEATURE_CHANNELS
    time_dim: int = 128
    # Predict the residual around the pure-noise response sqrt(1-abar_t)*x_t;
    # keeps long reverse chains stable (the net only learns the data-driven
    # correction, not the scale-carrying identity component).
    eps_base: bool = True

    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        groups = 8 if in_ch % 8 == 0 else 1
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        groups = 8 if out_ch % 8 == 0 else 1
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNetDenoiser(nn.Module):
    """Three-way conditioned UNet: noisy field, timestep embedding, condition features."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = config.widths()
        n_levels = len(widths)
        time_dim = config.time_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, w in enumerate(widths):
            blocks = nn.ModuleList(
                [_ResBlock(w, w, time_dim) for _ in range(config.res_blocks_per_level)]
            )
            self.down_blocks.append(blocks)
            self.down_attn.append(
                CrossAttentionBlock(w, config.cond_channels, config.attn_dim)
                if i in config.attn_levels
                else None
            )
            if i < n_levels - 1:
                self.downsamples.append(nn.Conv2d(w, widths[i + 1], 3, stride=2, padding=1))

        self.mid1 = _ResBlock(widths[-1], widths[-1], time_dim)
        self.mid2 = _ResBlock(widths[-1], widths[-1], time_dim)

        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for i in reversed(range(n_levels - 1)):
            self.upsamples.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            blocks = nn.ModuleList(
                [_ResBlock(2 * widths[i], widths[i], time_dim)]
                + [
                    _ResBlock(widths[i], widths[i], time_dim)
                    for _ in range(config.res_blocks_per_level - 1)
                ]
            )
            self.up_blocks.append(blocks)
            self.up_attn.append(
                CrossAttentionBlock(widths[i], config.cond_channels, config.attn_dim)
                if i in config.attn_levels
                else None
            )

        groups = 8 if widths[0] % 8 == 0 else 1
        self.norm_out = nn.GroupNorm(groups, widths[0])
        self.conv_out = nn.Conv2d(widths[0], config.in_channels, 3, padding=1)
        # sqrt(1 - abar_t) lookup for the eps_base term; filled by set_schedule.
        self.register_buffer("base_scale", torch.zeros(0), persistent=True)

    def set_schedule(self, schedule) -> None:
        scale = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bars)).float()
        self.base_scale = scale

    def forward(self, x: torch.Tensor, t, cond_features: torch.Tensor | None) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValidationError(
                f"denoiser expects [B, {self.config.in_channels}, H, W], got {tuple(x.shape)}"
            )
        if not torch.is_tensor(t):
            t = torch.as_tensor([int(t)] * x.shape[0])
        if cond_features is None:
            cond_features = torch.zeros(
                x.shape[0], self.config.cond_channels, x.shape[2], x.shape[3], dtype=x.dtype
            )
        if cond_features.ndim == 3:
            cond_features = cond_features.unsqueeze(0).expand(x.shape[0], -1, -1, -1)

        temb = self.time_mlp(sinusoidal_embedding(t, self.config.time_dim))
        h = self.conv_in(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, temb)
            if self.down_attn[i] is not None:
                h = self.down_attn[i](h, cond_features)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid1(h, temb)
        h = self.mid2(h, temb)

        n_levels = len(self.down_blocks)
        for j, blocks in enumerate(self.up_blocks):
            level = n_levels - 2 - j
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.upsamples[j](h)
            h = torch.cat([h, skips[level]], dim=1)
            for block in blocks:
                h = block(h, temb)
            if self.up_attn[j] is not None:
                h = self.up_attn[j](h, cond_features)

        out = self.conv_out(F.silu(self.norm_out(h)))
        if self.config.eps_base:
            if self.base_scale.numel() == 0:
                raise ValidationError("eps_base model used before set_schedule()")
            scale = self.base_scale[t.long() - 1].to(x.dtype)
            out = out + scale[:, None, None, None] * x
        return out

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def denoise(
    model: UNetDenoiser,
    x_t: torch.Tensor,
    t,
    cond_features: torch.Tensor | None,
) -> torch.Tensor:
    """ε̂ for a single field [C, H, W] or a batch [B, C, H, W]."""
    single = x_t.ndim == 3
    x = x_t.unsqueeze(0) if single else x_t
    with torch.no_grad():
        eps = model(x, t, cond_features)
    return eps.squeeze(0) if single else eps


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    seed: int = 0
    condition_zeroed: bool = False
    train_encoder: bool = False
    log_every: int = 200


@dataclass
class TrainResult:
    model: UNetDenoiser
    ema_state: dict[str, torch.Tensor]
    losses: list[float] = field(default_factory=list)

    def ema_model(self) -> UNetDenoiser:
        m = UNetDenoiser(self.model.config)
        m.load_state_dict(self.ema_state)
        m.eval()
        return m


def train(
    targets: np.ndarray,
    conditions: np.ndarray,
    schedule: NoiseSchedule,
    encoder: ConditionEncoder,
    denoiser_config: DenoiserConfig,
    config: TrainConfig,
) -> TrainResult:
    """Train ε_θ on normalized (target, condition) pairs.

    Per sample a uniform t ∈ [1, T] and fresh Gaussian noise are drawn; the
    condition is encoded on the fly (encoder frozen unless train_encoder).
    """
    targets = np.asarray(targets, dtype=np.float32)
    conditions = np.asarray(conditions, dtype=np.float32)
    if targets.ndim != 4 or targets.shape[0] == 0:
        raise ValidationError("train: targets must be non-empty [N, C, H, W]")
    if conditions.shape[0] != targets.shape[0]:
        raise ValidationError("train: targets/conditions sample counts differ")

    torch.manual_seed(config.seed)
    model = UNetDenoiser(denoiser_config)
    model.set_schedule(schedule)
    log.info("denoiser parameters: %d", model.parameter_count())
    encoder = encoder.train() if config.train_encoder else encoder.eval()
    params = list(model.parameters())
    if config.train_encoder:
        params += list(encoder.parameters())
    opt = torch.optim.AdamW(
        params, lr=config.lr, betas=config.adam_betas, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng([config.seed, 0x7124])
    ema_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    n = targets.shape[0]
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        t_vec = rng.integers(1, schedule.T + 1, size=config.batch_size)
        noise = rng.standard_normal((config.batch_size,) + targets.shape[1:]).astype(np.float32)

        x0 = torch.from_numpy(targets[idx])
        eps = torch.from_numpy(noise)
        cond = torch.from_numpy(conditions[idx])
        if config.condition_zeroed:
            cond = torch.zeros_like(cond)
        if config.train_encoder:
            y_feat = encoder(cond)
        else:
            with torch.no_grad():
                y_feat = encoder(cond)
        t_t = torch.from_numpy(t_vec)

        loss = training_loss(schedule, x0, y_feat, t_t, eps, model)
        opt.zero_grad()
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        with torch.no_grad():
            ema_state = ema_update(
                ema_state, {k: v.detach() for k, v in model.state_dict().items()}, config.ema_decay
            )
        losses.append(float(loss.detach()))
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = float(np.mean(losses[-config.log_every :]))
            log.info("step %d/%d loss %.4f", step + 1, config.steps, recent)

    model.eval()
    return TrainResult(model=model, ema_state=ema_state, losses=losses)


def eval_loss(
    model: UNetDenoiser,
    targets: np.ndarray,
    cond_features_fn,
    schedule: NoiseSchedule,
    seed: int = 0,
    n_draws: int = 4,
) -> float:
    """Mean denoising MSE over fixed (t, noise) draws; ε̂=0 scores ≈ 1."""
    rng = np.random.default_rng([seed, 0xE7A1])
    total, count = 0.0, 0
    model.eval()
    for i in range(targets.shape[0]):
        x0 = torch.from_numpy(targets[i : i + 1].astype(np.float32))
        y = cond_features_fn(i)
        for _ in range(n_draws):
            t = int(rng.integers(1, schedule.T + 1))
            noise = torch.from_numpy(
                rng.standard_normal(x0.shape).astype(np.float32)
            )
            with torch.no_grad():
                loss = training_loss(schedule, x0, y, t, noise, model)
            total += float(loss)
            count += 1
    return total / count
