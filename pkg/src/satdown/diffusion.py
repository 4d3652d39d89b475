"""Noise schedule, forward diffusion, reverse-step statistics, training objective.

Index convention: steps are 1-based, t ∈ [1, T], with alpha_bar(0) = 1 so the
t = 1 reverse step is deterministic. Schedule coefficients are float64
scalars; the array ops below work unchanged on numpy arrays and torch
tensors (only scalar multiplication/addition is used).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """betas[i] = β_{i+1}; alphas = 1 − β; alpha_bars[i] = ᾱ_{i+1} = Π α."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        if betas.ndim != 1 or betas.size < 2:
            raise ValidationError("betas must be a 1-D array with T >= 2")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValidationError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alphas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        if np.any(np.diff(alpha_bars) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValidationError(f"t={t} outside [1, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        t = int(t)
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._check_t(t) - 1])


def make_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Linear schedule: β_t = β_1 + (t−1)/(T−1)·(β_T − β_1)."""
    if T < 2:
        raise ValidationError("T must be >= 2")
    if not 0 < beta_1 <= beta_T < 1:
        raise ValidationError(f"need 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_T})")
    t = np.arange(T, dtype=np.float64)
    return NoiseSchedule(beta_1 + t / (T - 1) * (beta_T - beta_1))


def q_step(schedule: NoiseSchedule, x_prev, t: int, noise):
    """One forward step: x_t = √(1−β_t)·x_{t−1} + √β_t·noise."""
    beta = schedule.beta(t)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def q_sample(schedule: NoiseSchedule, x_0, t: int, noise):
    """Closed form: x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·noise. t = 0 returns x_0."""
    if int(t) == 0:
        return x_0 + 0 * noise
    ab = schedule.alpha_bar(schedule._check_t(t))
    return math.sqrt(ab) * x_0 + math.sqrt(1.0 - ab) * noise


def predict_x0(schedule: NoiseSchedule, x_t, eps_hat, t: int):
    """x̃_0 = x_t/√ᾱ_t − √(1−ᾱ_t)/√ᾱ_t · ε̂."""
    ab = schedule.alpha_bar(schedule._check_t(t))
    return x_t / math.sqrt(ab) - (math.sqrt(1.0 - ab) / math.sqrt(ab)) * eps_hat


def posterior(schedule: NoiseSchedule, x_t, x0_tilde, t: int):
    """Mean and variance of q(x_{t−1} | x_t, x_0 = x̃_0).

    μ̃_t = √ᾱ_{t−1}·β_t/(1−ᾱ_t)·x̃_0 + √α_t·(1−ᾱ_{t−1})/(1−ᾱ_t)·x_t,
    β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t. With ᾱ_0 = 1, the t = 1 step is
    deterministic (β̃_1 = 0, μ̃_1 = x̃_0).
    """
    t = schedule._check_t(t)
    beta = schedule.beta(t)
    alpha = schedule.alpha(t)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0_tilde + ct * x_t
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    return mean, var


def training_loss(schedule: NoiseSchedule, x_0, condition_features, t, noise, denoiser):
    """E‖ε − ε_θ(x_t, y′, t)‖²: MSE between the injected and estimated noise.

    x_0 and noise may be single samples or batches; ``denoiser`` is called as
    denoiser(x_t, t, condition_features).
    """
    if x_0.shape != noise.shape:
        raise ValidationError(f"x_0 shape {tuple(x_0.shape)} != noise {tuple(noise.shape)}")
    x_t = q_sample(schedule, x_0, t, noise) if np.isscalar(t) or getattr(t, "ndim", 0) == 0 else _q_sample_batch(schedule, x_0, t, noise)
    eps_hat = denoiser(x_t, t, condition_features)
    if eps_hat.shape != noise.shape:
        raise ValidationError(
            f"denoiser output shape {tuple(eps_hat.shape)} != noise {tuple(noise.shape)}"
        )
    return ((eps_hat - noise) ** 2).mean()


def _q_sample_batch(schedule: NoiseSchedule, x_0, t, noise):
    """q_sample with a per-sample integer t vector (batch dim first)."""
    ab = schedule.alpha_bars
    t_idx = np.asarray(t, dtype=np.int64).reshape(-1)
    if np.any(t_idx < 1) or np.any(t_idx > schedule.T):
        raise ValidationError("t entries outside [1, T]")
    ab_t = ab[t_idx - 1]
    shape = (-1,) + (1,) * (x_0.ndim - 1)
    if isinstance(x_0, np.ndarray):
        ab_t = ab_t.reshape(shape)
    else:  # torch tensor
        import torch

        ab_t = torch.as_tensor(ab_t, dtype=x_0.dtype, device=x_0.device).reshape(shape)
    return ab_t**0.5 * x_0 + (1.0 - ab_t) ** 0.5 * noise


def ema_update(ema_params: dict, current_params: dict, decay: float) -> dict:
    """ema ← decay·ema + (1−decay)·current, elementwise over matching keys."""
    if not 0.0 <= decay < 1.0:
        raise ValidationError(f"decay must be in [0, 1), got {decay}")
    if set(ema_params) != set(current_params):
        raise ValidationError("ema/current parameter keys differ")
    out = {}
    for k, e in ema_params.items():
        c = current_params[k]
        if tuple(e.shape) != tuple(c.shape):
            raise ValidationError(f"shape mismatch for {k!r}: {tuple(e.shape)} vs {tuple(c.shape)}")
        out[k] = decay * e + (1.0 - decay) * c
    return out
