"""Satellite-feature pathway: conv encoder/decoder pretraining and cross-attention fusion.

The encoder lifts condition maps to 64 feature channels (optionally at a
spatial stride); the symmetric decoder exists only to pretrain it by
reconstruction. Cross-attention follows
softmax(W_Q(x)·W_K(y')ᵀ/√d)·W_V(y') with row softmax over the condition
tokens; projections carry no bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError

FEATURE_CHANNELS = 64
_LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stride: int = 1
    hidden: int = 32


class _ResidualConv(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), _LEAKY_SLOPE)
        h = self.conv2(h)
        return F.leaky_relu(x + h, _LEAKY_SLOPE)


class ConditionEncoder(nn.Module):
    """3×3 conv stack with skip connections, output fixed at 64 channels."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.conv_in = nn.Conv2d(config.in_channels, config.hidden, 3, padding=1)
        self.down = nn.Conv2d(
            config.hidden, FEATURE_CHANNELS, 3, stride=config.stride, padding=1
        )
        self.blocks = nn.ModuleList([_ResidualConv(FEATURE_CHANNELS) for _ in range(2)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValidationError(
                f"encoder expects [B, {self.config.in_channels}, H, W], got {tuple(x.shape)}"
            )
        h = F.leaky_relu(self.conv_in(x), _LEAKY_SLOPE)
        h = F.leaky_relu(self.down(h), _LEAKY_SLOPE)
        for block in self.blocks:
            h = block(h)
        return h


class ConditionDecoder(nn.Module):
    """Symmetric reconstruction head used only during pretraining."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList([_ResidualConv(FEATURE_CHANNELS) for _ in range(2)])
        self.up = nn.ConvTranspose2d(
            FEATURE_CHANNELS,
            config.hidden,
            3,
            stride=config.stride,
            padding=1,
            output_padding=config.stride - 1,
        )
        self.conv_out = nn.Conv2d(config.hidden, config.in_channels, 3, padding=1)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 4 or y.shape[1] != FEATURE_CHANNELS:
            raise ValidationError(f"decoder expects [B, {FEATURE_CHANNELS}, H, W], got {tuple(y.shape)}")
        h = y
        for block in self.blocks:
            h = block(h)
        h = F.leaky_relu(self.up(h), _LEAKY_SLOPE)
        return self.conv_out(h)


def encode(condition, encoder: ConditionEncoder) -> torch.Tensor:
    """Feature map y' for a normalized condition (GridField, [C,H,W] or [B,C,H,W])."""
    from .grid import GridField

    if isinstance(condition, GridField):
        condition = condition.values
    if not torch.is_tensor(condition):
        condition = torch.from_numpy(np.asarray(condition, dtype=np.float32))
    condition = condition.to(torch.float32)
    single = condition.ndim == 3
    x = condition.unsqueeze(0) if single else condition
    y = encoder(x)
    return y.squeeze(0) if single else y


def decode(features: torch.Tensor, decoder: ConditionDecoder) -> torch.Tensor:
    single = features.ndim == 3
    y = features.unsqueeze(0) if single else features
    x = decoder(y)
    return x.squeeze(0) if single else x


def resample_features(features: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinear resize of each feature channel onto the target token grid."""
    single = features.ndim == 3
    y = features.unsqueeze(0) if single else features
    if y.shape[-2:] != (target_h, target_w):
        y = F.interpolate(y, size=(target_h, target_w), mode="bilinear", align_corners=True)
    return y.squeeze(0) if single else y


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.1


@dataclass
class PretrainResult:
    encoder: ConditionEncoder
    decoder: ConditionDecoder
    epoch_losses: list[float]
    holdout_mse: float
    holdout_variance: float


def pretrain_encoder(
    conditions: np.ndarray | torch.Tensor,
    encoder_config: EncoderConfig,
    config: PretrainConfig | None = None,
) -> PretrainResult:
    """Reconstruction pretraining (MSE) of the encoder/decoder pair.

    ``conditions``: normalized condition fields [N, C, H, W]. A holdout
    split is carved off the end for the reconstruction-quality estimate.
    """
    config = config or PretrainConfig()
    data = torch.as_tensor(np.asarray(conditions), dtype=torch.float32)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValidationError("pretrain_encoder: need a non-empty [N, C, H, W] dataset")
    n_hold = int(round(config.holdout_fraction * data.shape[0]))
    train = data[: data.shape[0] - n_hold]
    hold = data[data.shape[0] - n_hold :]
    if train.shape[0] == 0 or hold.shape[0] == 0:
        train, hold = data, data

    torch.manual_seed(config.seed)
    encoder = ConditionEncoder(encoder_config)
    decoder = ConditionDecoder(encoder_config)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=config.lr, betas=(0.9, 0.999))
    order_rng = np.random.default_rng([config.seed, 0xE7C])

    epoch_losses = []
    for _ in range(config.epochs):
        perm = order_rng.permutation(train.shape[0])
        total, count = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            batch = train[perm[start : start + config.batch_size]]
            recon = decoder(encoder(batch))
            loss = F.mse_loss(recon, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * batch.shape[0]
            count += batch.shape[0]
        epoch_losses.append(total / count)

    encoder.eval()
    decoder.eval()
    with torch.no_grad():
        recon = decoder(encoder(hold))
        holdout_mse = float(F.mse_loss(recon, hold))
        holdout_var = float(hold.var())
    return PretrainResult(encoder, decoder, epoch_losses, holdout_mse, holdout_var)


# --- cross-attention --------------------------------------------------------


@dataclass
class CrossAttentionParams:
    """Projection matrices: W_Q [d, d_eps], W_K and W_V [d, d_tau]."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor

    def __post_init__(self):
        if self.w_q.ndim != 2 or self.w_k.ndim != 2 or self.w_v.ndim != 2:
            raise ValidationError("attention projections must be 2-D")
        d = self.w_q.shape[0]
        if self.w_k.shape[0] != d or self.w_v.shape[0] != d:
            raise ValidationError("W_Q, W_K, W_V must share their output dimension d")
        if self.w_k.shape[1] != self.w_v.shape[1]:
            raise ValidationError("W_K and W_V must share the condition token dimension")

    @property
    def d(self) -> int:
        return int(self.w_q.shape[0])


def cross_attention(
    x_tokens: torch.Tensor, y_tokens: torch.Tensor, params: CrossAttentionParams
) -> torch.Tensor:
    """softmax(W_Q(x)·W_K(y')ᵀ/√d)·W_V(y'); softmax over the condition axis.

    Token layouts [N, d_eps]/[M, d_tau] or batched [B, N, d_eps]/[B, M, d_tau].
    """
    if x_tokens.shape[-1] != params.w_q.shape[1]:
        raise ValidationError(
            f"query token dim {x_tokens.shape[-1]} != W_Q input dim {params.w_q.shape[1]}"
        )
    if y_tokens.shape[-1] != params.w_k.shape[1]:
        raise ValidationError(
            f"condition token dim {y_tokens.shape[-1]} != W_K input dim {params.w_k.shape[1]}"
        )
    q = x_tokens @ params.w_q.T
    k = y_tokens @ params.w_k.T
    v = y_tokens @ params.w_v.T
    logits = q @ k.transpose(-1, -2) / (params.d**0.5)
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


class CrossAttentionBlock(nn.Module):
    """Residual cross-attention over per-pixel tokens of a feature map."""

    def __init__(self, channels: int, cond_channels: int = FEATURE_CHANNELS, d: int = 64):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.w_q = nn.Parameter(torch.empty(d, channels))
        self.w_k = nn.Parameter(torch.empty(d, cond_channels))
        self.w_v = nn.Parameter(torch.empty(d, cond_channels))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)
        self.out = nn.Linear(d, channels)

    def forward(self, x: torch.Tensor, cond_features: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        y = resample_features(cond_features, h, w)
        x_tokens = self.norm(x).flatten(2).transpose(1, 2)  # [B, HW, C]
        y_tokens = y.flatten(2).transpose(1, 2)  # [B, HW, C_cond]
        att = cross_attention(x_tokens, y_tokens, CrossAttentionParams(self.w_q, self.w_k, self.w_v))
        out = self.out(att).transpose(1, 2).reshape(b, c, h, w)
        return x + out
