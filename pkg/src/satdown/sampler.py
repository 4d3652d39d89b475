"""Zero-shot guided ancestral sampling with an optimizable degradation kernel.

The degradation kernel D_φ is a per-channel strided convolution mapping the
generated resolution down to the guidance resolution (the distance term
compares D_φ(x̃_0) against the low-resolution field z). Each reverse step
estimates x̃_0, shifts it along the distance gradient scaled by
s(1−ᾱ_t)/(√ᾱ_{t−1}β_t), samples x_{t−1} from the shifted posterior, and then
takes a gradient step of size l on φ. A deterministic DDIM path runs the
same guidance on an evenly strided timestep subsequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .conditioning import encode
from .diffusion import NoiseSchedule, posterior, predict_x0
from .errors import ValidationError
from .grid import GridField, NormStats, StationSet, fractional_index


@dataclass(frozen=True)
class DegradationKernel:
    """Per-channel k×k strided convolution weights φ."""

    phi: torch.Tensor  # [C, k, k]
    stride: int
    normalize: bool = True

    def __post_init__(self):
        if self.phi.ndim != 3 or self.phi.shape[1] != self.phi.shape[2]:
            raise ValidationError(f"phi must be [C, k, k], got {tuple(self.phi.shape)}")
        if self.phi.shape[1] % 2 == 0:
            raise ValidationError("kernel size k must be odd")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        if self.phi.shape[1] < self.stride:
            raise ValidationError(
                f"kernel size {self.phi.shape[1]} must be >= stride {self.stride}"
            )

    @property
    def size(self) -> int:
        return int(self.phi.shape[1])

    @property
    def channels(self) -> int:
        return int(self.phi.shape[0])

    def updated(self, new_phi: torch.Tensor) -> "DegradationKernel":
        """Replacement with optional projection back onto sum(φ) = 1 per channel."""
        phi = new_phi.detach().clone()
        if self.normalize:
            k = phi.shape[1]
            deficit = 1.0 - phi.sum(dim=(1, 2), keepdim=True)
            phi = phi + deficit / (k * k)
        return replace(self, phi=phi)


def uniform_kernel(
    channels: int, size: int = 9, stride: int = 1, normalize: bool = True
) -> DegradationKernel:
    phi = torch.full((channels, size, size), 1.0 / (size * size))
    return DegradationKernel(phi, stride, normalize)


def box_kernel(channels: int, size: int, stride: int, normalize: bool = True) -> DegradationKernel:
    """The exact box average embedded at the window offset used by apply_kernel."""
    if size < stride:
        raise ValidationError("box kernel needs size >= stride")
    left = (size - stride) // 2
    phi = torch.zeros(channels, size, size)
    phi[:, left : left + stride, left : left + stride] = 1.0 / (stride * stride)
    return DegradationKernel(phi, stride, normalize)


def _pad_for_kernel(x: torch.Tensor, size: int, stride: int, lon_periodic: bool) -> torch.Tensor:
    total = size - stride
    if total == 0:
        return x
    left = total // 2
    right = total - left
    if lon_periodic:
        x = F.pad(x, (left, right, 0, 0), mode="circular")
        x = F.pad(x, (0, 0, left, right), mode="reflect")
    else:
        x = F.pad(x, (left, right, left, right), mode="reflect")
    return x


def apply_kernel(
    x: torch.Tensor, kernel: DegradationKernel, lon_periodic: bool = False
) -> torch.Tensor:
    """D_φ(x): per-channel strided convolution, output dims = input dims / stride."""
    single = x.ndim == 3
    if single:
        x = x.unsqueeze(0)
    _, c, h, w = x.shape
    if c != kernel.channels:
        raise ValidationError(f"field has {c} channels, kernel {kernel.channels}")
    if h % kernel.stride or w % kernel.stride:
        raise ValidationError(f"dims {h}x{w} not divisible by stride {kernel.stride}")
    padded = _pad_for_kernel(x, kernel.size, kernel.stride, lon_periodic)
    weight = kernel.phi.to(x.dtype).unsqueeze(1)  # [C, 1, k, k]
    out = F.conv2d(padded, weight, stride=kernel.stride, groups=c)
    return out.squeeze(0) if single else out


@dataclass(frozen=True)
class StationTargets:
    """Stations mapped to fractional grid indices with normalized observations.

    values is [S, C] in model units; NaN marks a missing observation.
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    periodic: bool = True

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        cols = np.asarray(self.cols, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if rows.shape != cols.shape or rows.ndim != 1:
            raise ValidationError("rows/cols must be matching 1-D arrays")
        if values.ndim != 2 or values.shape[0] != rows.size:
            raise ValidationError("values must be [S, C] matching rows")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.rows.size)

    @staticmethod
    def from_stations(
        stations: StationSet,
        lats: np.ndarray,
        lons: np.ndarray,
        channels: tuple[str, ...],
        stats: NormStats | None,
        periodic: bool = True,
    ) -> "StationTargets":
        rows, cols, values = [], [], []
        for s in stations:
            r, c = fractional_index(lats, lons, s.lat, s.lon, periodic)
            rows.append(r)
            cols.append(c)
            row_vals = []
            for i, name in enumerate(channels):
                if name in s.observations:
                    v = float(s.observations[name])
                    if stats is not None:
                        v = (v - float(stats.mean[i])) / float(stats.std[i])
                    row_vals.append(v)
                else:
                    row_vals.append(np.nan)
            values.append(row_vals)
        return StationTargets(np.asarray(rows), np.asarray(cols), np.asarray(values), periodic)

    def shifted(self, row_offset: float, col_offset: float) -> "StationTargets":
        return StationTargets(
            self.rows - row_offset, self.cols - col_offset, self.values, periodic=False
        )


def bilinear_point_sample(x: torch.Tensor, targets: StationTargets) -> torch.Tensor:
    """Differentiable bilinear sampling of [C, H, W] at fractional (row, col); returns [S, C]."""
    c, h, w = x.shape
    rows = torch.as_tensor(targets.rows, dtype=x.dtype)
    cols = torch.as_tensor(targets.cols, dtype=x.dtype)
    r0 = rows.floor().long().clamp(0, h - 2)
    fr = rows - r0.to(x.dtype)
    if targets.periodic:
        c0 = cols.floor().long()
        fc = cols - c0.to(x.dtype)
        c0 = c0.remainder(w)
        c1 = (c0 + 1).remainder(w)
    else:
        c0 = cols.floor().long().clamp(0, w - 2)
        fc = cols - c0.to(x.dtype)
        c1 = c0 + 1
    r1 = r0 + 1
    top = (1 - fc) * x[:, r0, c0] + fc * x[:, r0, c1]
    bot = (1 - fc) * x[:, r1, c0] + fc * x[:, r1, c1]
    out = (1 - fr) * top + fr * bot  # [C, S]
    return out.transpose(0, 1)


@dataclass(frozen=True)
class DistanceConfig:
    """Weights and station targets for the guidance distance.

    The grid term is the MSE between D_φ(x̃_0) and z; the station term is the
    MAE between bilinear samples of x̃_0 and observations, both averaged over
    their own element counts before weighting.
    """

    w_grid: float = 1.0
    w_station: float = 0.0
    stations: StationTargets | None = None

    def __post_init__(self):
        if self.w_grid < 0 or self.w_station < 0:
            raise ValidationError("distance weights must be >= 0")
        if self.w_grid + self.w_station <= 0:
            raise ValidationError("at least one distance weight must be positive")
        if self.w_station > 0 and (self.stations is None or len(self.stations) == 0):
            raise ValidationError("w_station > 0 requires station targets")


def distance(
    x0_tilde: torch.Tensor,
    kernel: DegradationKernel,
    z: torch.Tensor,
    config: DistanceConfig,
    lon_periodic: bool = False,
) -> tuple[float, torch.Tensor, torch.Tensor]:
    """L(x̃_0, φ) with exact gradients w.r.t. both arguments.

    Returns (L, ∂L/∂x̃_0, ∂L/∂φ); the MAE subgradient at zero residual is 0.
    """
    if x0_tilde.ndim != 3:
        raise ValidationError("x0_tilde must be [C, H, W]")
    x = x0_tilde.detach().clone().requires_grad_(True)
    phi = kernel.phi.detach().clone().requires_grad_(True)
    live_kernel = DegradationKernel(phi, kernel.stride, kernel.normalize)

    loss = x.new_zeros(())
    if config.w_grid > 0:
        pred = apply_kernel(x, live_kernel, lon_periodic)
        if pred.shape != z.shape:
            raise ValidationError(f"D(x) shape {tuple(pred.shape)} != z {tuple(z.shape)}")
        loss = loss + config.w_grid * F.mse_loss(pred, z.to(x.dtype))
    if config.w_station > 0:
        targets = config.stations
        sampled = bilinear_point_sample(x, targets)  # [S, C]
        obs = torch.as_tensor(targets.values, dtype=x.dtype)
        present = torch.isfinite(obs)
        if not bool(present.any()):
            raise ValidationError("station term requested but no observations present")
        resid = torch.where(present, sampled - torch.nan_to_num(obs), torch.zeros_like(sampled))
        mae = resid.abs().sum() / present.sum()
        loss = loss + config.w_station * mae

    grad_x, grad_phi = torch.autograd.grad(loss, [x, phi], allow_unused=True)
    if grad_x is None:
        grad_x = torch.zeros_like(x)
    if grad_phi is None:
        grad_phi = torch.zeros_like(phi)
    return float(loss.detach()), grad_x.detach(), grad_phi.detach()


@dataclass(frozen=True)
class GuidanceConfig:
    """Sampling knobs: guidance scale s, kernel learning rate l, schedule, DDIM steps."""

    schedule: NoiseSchedule
    s: float = 1.0
    l: float = 0.0
    ddim_steps: int | None = None
    kernel_size: int = 9

    def __post_init__(self):
        if self.s < 0 or self.l < 0:
            raise ValidationError("s and l must be >= 0")
        if self.kernel_size % 2 == 0:
            raise ValidationError("kernel_size must be odd")


def guidance_shift_coef(schedule: NoiseSchedule, s: float, t: int) -> float:
    """s(1−ᾱ_t)/(√ᾱ_{t−1}·β_t): scale applied to ∇_{x̃_0}L before the posterior."""
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    return s * (1.0 - ab_t) / (math.sqrt(ab_prev) * schedule.beta(t))


def guided_step(
    x_t: torch.Tensor,
    t: int,
    y_feat: torch.Tensor | None,
    z: torch.Tensor,
    kernel: DegradationKernel,
    gcfg: GuidanceConfig,
    dcfg: DistanceConfig,
    denoise_fn,
    rng: torch.Generator,
    lon_periodic: bool = False,
) -> tuple[torch.Tensor, DegradationKernel]:
    """One reverse step: x̃_0 estimate → distance gradients → shift → posterior
    sample (no noise at t = 1) → kernel update. s = l = 0 reduces to the
    unguided ancestral step."""
    schedule = gcfg.schedule
    eps = denoise_fn(x_t, t, y_feat)
    x0t = predict_x0(schedule, x_t, eps, t)

    new_kernel = kernel
    if gcfg.s > 0 or gcfg.l > 0:
        _, grad_x, grad_phi = distance(x0t, kernel, z, dcfg, lon_periodic)
        if gcfg.s > 0:
            x0t = x0t - guidance_shift_coef(schedule, gcfg.s, t) * grad_x

    mean, var = posterior(schedule, x_t, x0t, t)
    if t > 1:
        noise = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
        x_prev = mean + math.sqrt(var) * noise
    else:
        x_prev = mean

    if gcfg.l > 0:
        new_kernel = kernel.updated(kernel.phi - gcfg.l * grad_phi)
    return x_prev, new_kernel


def hr_coords_from_lr(
    lr_coords: np.ndarray, stride: int
) -> np.ndarray:
    """Uniform fine-grid coordinates whose s-block means reproduce lr_coords."""
    spacing = (lr_coords[-1] - lr_coords[0]) / (lr_coords.size - 1) if lr_coords.size > 1 else 1.0
    fine_spacing = spacing / stride
    j = np.arange(lr_coords.size * stride, dtype=np.float64)
    return lr_coords[0] + (j - (stride - 1) / 2.0) * fine_spacing


@dataclass
class SamplingProblem:
    """Prepared, normalized inputs shared by the ancestral/DDIM/patched loops."""

    z: torch.Tensor  # [C, h, w] normalized
    y_feat: torch.Tensor | None
    dcfg: DistanceConfig
    stride: int
    out_lats: np.ndarray
    out_lons: np.ndarray
    channels: tuple[tuple[str, str], ...]
    timestamp: object
    periodic: bool
    stats: NormStats


def prepare_problem(
    z: GridField,
    condition: GridField | None,
    checkpoint: Checkpoint,
    dcfg: DistanceConfig,
    out_size: tuple[int, int],
) -> SamplingProblem:
    out_h, out_w = out_size
    c, h, w = z.shape
    if out_h % h or out_w % w:
        raise ValidationError(f"out size {out_size} not an integer multiple of z {h}x{w}")
    stride_h, stride_w = out_h // h, out_w // w
    if stride_h != stride_w:
        raise ValidationError(f"anisotropic scale {stride_h}x{stride_w} not supported")
    if z.channel_names != checkpoint.target_stats.channels:
        raise ValidationError(
            f"z channels {z.channel_names} != checkpoint {checkpoint.target_stats.channels}"
        )

    stats = checkpoint.target_stats
    z_norm = (z.values - stats.mean[:, None, None]) / stats.std[:, None, None]
    z_t = torch.from_numpy(z_norm.astype(np.float32))

    y_feat = None
    if condition is not None:
        cs = checkpoint.cond_stats
        if condition.channel_names != cs.channels:
            raise ValidationError(
                f"condition channels {condition.channel_names} != checkpoint {cs.channels}"
            )
        cond_norm = (condition.values - cs.mean[:, None, None]) / cs.std[:, None, None]
        encoder = checkpoint.build_encoder()
        with torch.no_grad():
            y_feat = encode(cond_norm.astype(np.float32), encoder)

    out_lats = hr_coords_from_lr(z.lats, stride_h)
    out_lons = hr_coords_from_lr(z.lons, stride_w)

    if dcfg.w_station > 0 and dcfg.stations is None:
        raise ValidationError("station guidance requested but no stations prepared")
    return SamplingProblem(
        z=z_t,
        y_feat=y_feat,
        dcfg=dcfg,
        stride=stride_h,
        out_lats=out_lats,
        out_lons=out_lons,
        channels=z.channels,
        timestamp=z.timestamp,
        periodic=z.periodic_lon,
        stats=stats,
    )


def prepare_station_targets(
    stations: StationSet,
    z: GridField,
    checkpoint: Checkpoint,
    out_size: tuple[int, int],
) -> StationTargets:
    """Map guidance stations onto the output grid in normalized units."""
    stride = out_size[0] // z.shape[1]
    lats = hr_coords_from_lr(z.lats, stride)
    lons = hr_coords_from_lr(z.lons, out_size[1] // z.shape[2])
    return StationTargets.from_stations(
        stations, lats, lons, checkpoint.target_stats.channels,
        checkpoint.target_stats, z.periodic_lon,
    )


@dataclass
class SampleDetails:
    kernel: DegradationKernel
    denoiser_calls: int = 0
    x0_normalized: torch.Tensor | None = None


def _finalize(problem: SamplingProblem, x: torch.Tensor) -> GridField:
    stats = problem.stats
    values = x.numpy() * stats.std[:, None, None] + stats.mean[:, None, None]
    return GridField(
        values=values.astype(np.float32),
        lats=problem.out_lats,
        lons=problem.out_lons,
        channels=problem.channels,
        timestamp=problem.timestamp,
        periodic_lon=problem.periodic,
    )


def sample(
    z: GridField,
    condition: GridField | None,
    checkpoint: Checkpoint,
    gcfg: GuidanceConfig,
    dcfg: DistanceConfig,
    out_size: tuple[int, int],
    seed: int = 0,
    details: SampleDetails | None = None,
) -> GridField:
    """Full ancestral loop: x_T ~ N(0, I) down to x_0, denormalized onto out_size."""
    problem = prepare_problem(z, condition, checkpoint, dcfg, out_size)
    model = checkpoint.build_denoiser(ema=True)

    def denoise_fn(x, t, y):
        with torch.no_grad():
            return model(x.unsqueeze(0), t, None if y is None else y.unsqueeze(0)).squeeze(0)

    schedule = gcfg.schedule
    rng = torch.Generator().manual_seed(seed)
    x = torch.randn((len(problem.channels),) + tuple(out_size), generator=rng)
    kernel = uniform_kernel(len(problem.channels), gcfg.kernel_size, problem.stride)
    calls = 0
    for t in range(schedule.T, 0, -1):
        x, kernel = guided_step(
            x, t, problem.y_feat, problem.z, kernel, gcfg, problem.dcfg,
            denoise_fn, rng, problem.periodic,
        )
        calls += 1
    if details is not None:
        details.kernel = kernel
        details.denoiser_calls = calls
        details.x0_normalized = x
    return _finalize(problem, x)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly strided descending subsequence of [1, T] with exactly `steps` entries."""
    if not 1 <= steps <= T:
        raise ValidationError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    raw = np.linspace(T, 1, steps)
    ts = [int(math.floor(v + 0.5)) for v in raw]
    return ts


def ddim_sample(
    z: GridField,
    condition: GridField | None,
    checkpoint: Checkpoint,
    gcfg: GuidanceConfig,
    dcfg: DistanceConfig,
    out_size: tuple[int, int],
    steps: int = 50,
    seed: int = 0,
    details: SampleDetails | None = None,
) -> GridField:
    """Deterministic (η = 0) DDIM trajectory with the same x̃_0-shift guidance.

    ε is re-derived from the shifted x̃_0 before each jump so the trajectory
    stays consistent with the guided estimate; exactly `steps` denoiser calls.
    """
    problem = prepare_problem(z, condition, checkpoint, dcfg, out_size)
    model = checkpoint.build_denoiser(ema=True)

    def denoise_fn(x, t, y):
        with torch.no_grad():
            return model(x.unsqueeze(0), t, None if y is None else y.unsqueeze(0)).squeeze(0)

    schedule = gcfg.schedule
    ts = ddim_timesteps(schedule.T, steps)
    rng = torch.Generator().manual_seed(seed)
    x = torch.randn((len(problem.channels),) + tuple(out_size), generator=rng)
    kernel = uniform_kernel(len(problem.channels), gcfg.kernel_size, problem.stride)
    calls = 0
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        eps = denoise_fn(x, t, problem.y_feat)
        calls += 1
        x0t = predict_x0(schedule, x, eps, t)
        if gcfg.s > 0 or gcfg.l > 0:
            _, grad_x, grad_phi = distance(x0t, kernel, problem.z, problem.dcfg, problem.periodic)
            if gcfg.s > 0:
                x0t = x0t - guidance_shift_coef(schedule, gcfg.s, t) * grad_x
            if gcfg.l > 0:
                kernel = kernel.updated(kernel.phi - gcfg.l * grad_phi)
        ab_t = schedule.alpha_bar(t)
        ab_next = schedule.alpha_bar(t_next)
        eps_eff = (x - math.sqrt(ab_t) * x0t) / math.sqrt(1.0 - ab_t)
        x = math.sqrt(ab_next) * x0t + math.sqrt(1.0 - ab_next) * eps_eff
    if details is not None:
        details.kernel = kernel
        details.denoiser_calls = calls
        details.x0_normalized = x
    return _finalize(problem, x)
