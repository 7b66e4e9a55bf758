"""Noise schedules, the forward process and one-step clean-latent estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import BoundsError, ConfigError, NumericError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64, (T,)
    alphas_cumprod: np.ndarray  # float64, (T,)
    kind: str = "custom"

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_alphas_cumprod(cls, alphas_cumprod) -> "NoiseSchedule":
        ac = np.asarray(alphas_cumprod, dtype=np.float64)
        prev = np.concatenate([[1.0], ac[:-1]])
        return cls(1.0 - ac / prev, ac, "custom")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        betas = np.asarray(d["betas"], dtype=np.float64)
        return cls(betas, np.cumprod(1.0 - betas), d.get("kind", "custom"))

    def alpha_bar(self, t, like: torch.Tensor) -> torch.Tensor:
        """ᾱ_t broadcast against ``like`` (batch on dim 0)."""
        t = torch.as_tensor(t, dtype=torch.long)
        if bool((t < 0).any()) or bool((t >= self.T).any()):
            raise BoundsError(f"timestep outside [0, {self.T})")
        ab = torch.from_numpy(self.alphas_cumprod)[t].to(like.dtype)
        if ab.dim() == 1:
            ab = ab.reshape(-1, *([1] * (like.dim() - 1)))
        return ab


def make_schedule(T: int = 1000, kind: str = "scaled_linear", beta_start=None, beta_end=None) -> NoiseSchedule:
    """DDPM ``linear`` (1e-4..0.02) or Stable-Diffusion ``scaled_linear``
    (sqrt-space 0.00085..0.012) beta schedules."""
    if T < 1:
        raise ConfigError("schedule needs T >= 1")
    if kind == "linear":
        betas = np.linspace(beta_start or 1e-4, beta_end or 0.02, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace((beta_start or 0.00085) ** 0.5, (beta_end or 0.012) ** 0.5, T, dtype=np.float64) ** 2
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas, np.cumprod(1.0 - betas), kind)


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps."""
    ab = schedule.alpha_bar(t, z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def estimate_z0(z_t: torch.Tensor, eps_pred: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """One-step clean latent: (z_t - sqrt(1 - ᾱ_t) eps_pred) / sqrt(ᾱ_t)."""
    ab = schedule.alpha_bar(t, z_t)
    if bool((ab <= 0).any()):
        raise NumericError("alpha_bar must be positive to estimate z0")
    return (z_t - (1 - ab).sqrt() * eps_pred) / ab.sqrt()
