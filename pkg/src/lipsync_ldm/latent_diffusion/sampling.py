"""Input assembly and samplers (deterministic DDIM, ancestral DDPM)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError
from .schedule import NoiseSchedule, estimate_z0

DEFAULT_DDIM_STEPS = 20


def downsample_mask(mask, factor: int) -> torch.Tensor:
    """Area-average a pixel mask (..., H, W) to latent resolution (N, 1, h, w)."""
    m = mask.float() if torch.is_tensor(mask) else torch.tensor(np.asarray(mask), dtype=torch.float32)
    while m.dim() < 4:
        m = m.unsqueeze(0)
    return F.avg_pool2d(m, factor).clamp_(0.0, 1.0)


def assemble_unet_input(z_t, mask, masked_latent, ref_latent) -> torch.Tensor:
    """Concatenate [z_t (4) | mask (1) | masked latent (4) | reference latent (4)]."""
    n, _, h, w = z_t.shape
    if mask.shape[0] == 1 and n > 1:
        mask = mask.expand(n, -1, -1, -1)
    parts = (z_t, mask, masked_latent, ref_latent)
    expected = (4, 1, 4, 4)
    for p, c in zip(parts, expected):
        if p.dim() != 4 or tuple(p.shape) != (n, c, h, w):
            raise ShapeError(f"component of shape {tuple(p.shape)} does not match ({n}, {c}, {h}, {w})")
    return torch.cat(parts, dim=1)


def split_unet_input(x: torch.Tensor):
    if x.shape[1] != 13:
        raise ShapeError(f"expected 13 channels, got {x.shape[1]}")
    return x[:, 0:4], x[:, 4:5], x[:, 5:9], x[:, 9:13]


@dataclass
class Conditions:
    """Everything except z_t that the denoiser sees, for N = B x frames latents."""

    mask: torch.Tensor  # (N or 1, 1, h, w)
    masked_latent: torch.Tensor  # (N, 4, h, w)
    ref_latent: torch.Tensor  # (N, 4, h, w)
    context: torch.Tensor  # (N, 2m+1, dim)
    n_frames: Optional[int] = None

    @property
    def shape(self):
        return tuple(self.masked_latent.shape)


def timestep_sequence(T: int, steps: int) -> np.ndarray:
    """Descending, evenly spaced timesteps ending at 0; steps == T visits every t."""
    if steps < 1:
        raise ConfigError("sampling needs at least one step")
    if steps > T:
        raise ConfigError(f"steps ({steps}) exceed schedule length ({T})")
    return np.unique(np.round(np.linspace(0, T - 1, steps)).astype(np.int64))[::-1].copy()


def ddim_loop(eps_fn: Callable, z: torch.Tensor, schedule: NoiseSchedule, steps: int) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from z_T = ``z``. ``eps_fn(z_t, t)`` gives eps."""
    ts = timestep_sequence(schedule.T, steps)
    for i, t in enumerate(ts):
        eps = eps_fn(z, int(t))
        z0 = estimate_z0(z, eps, int(t), schedule)
        if i + 1 == len(ts):
            return z0
        ab_prev = schedule.alpha_bar(int(ts[i + 1]), z)
        z = ab_prev.sqrt() * z0 + (1 - ab_prev).sqrt() * eps
    return z


def ancestral_loop(eps_fn: Callable, z: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    """Full-length DDPM ancestral sampling with posterior variance beta~_t."""
    betas = schedule.betas
    ac = schedule.alphas_cumprod
    for t in range(schedule.T - 1, -1, -1):
        eps = eps_fn(z, t)
        alpha = 1.0 - betas[t]
        mean = (z - betas[t] / np.sqrt(1.0 - ac[t]) * eps) / np.sqrt(alpha)
        if t == 0:
            return mean
        var = betas[t] * (1.0 - ac[t - 1]) / (1.0 - ac[t])
        z = mean + np.sqrt(var) * torch.randn(z.shape, generator=generator, dtype=z.dtype)
    return z


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=dtype)


@torch.no_grad()
def ddim_sample(model, conditions: Conditions, schedule: NoiseSchedule, steps: int = DEFAULT_DDIM_STEPS, seed: int = 0) -> torch.Tensor:
    """Generate clean latents (N, 4, h, w) for the given conditions."""
    if steps < 1:
        raise ConfigError("ddim steps must be >= 1")
    was_training = model.training
    model.eval()
    z = initial_noise(conditions.shape, seed)

    def eps_fn(z_t, t):
        x = assemble_unet_input(z_t, conditions.mask, conditions.masked_latent, conditions.ref_latent)
        return model(x, torch.full((z_t.shape[0],), t, dtype=torch.long), conditions.context, conditions.n_frames)

    out = ddim_loop(eps_fn, z, schedule, steps)
    model.train(was_training)
    return out


def gaussian_eps_fn(mu: float, sigma: float, schedule: NoiseSchedule) -> Callable:
    """Exact noise predictor for 1-D data distributed N(mu, sigma^2)."""

    def eps_fn(z, t):
        ab = float(schedule.alphas_cumprod[t])
        var = ab * sigma**2 + 1.0 - ab
        return np.sqrt(1.0 - ab) * (z - np.sqrt(ab) * mu) / var

    return eps_fn
