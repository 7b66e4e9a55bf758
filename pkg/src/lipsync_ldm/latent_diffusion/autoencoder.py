"""Frame autoencoders. The default is a fixed orthonormal patch projection:
encode keeps four low-frequency coefficients per 8x8 RGB patch (luma mean,
luma vertical and horizontal cosine, red-blue chroma mean) and decode is
its transpose, so decode(encode(x)) is the orthogonal projection of x."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _patch_basis(factor: int) -> torch.Tensor:
    n = factor
    coords = (torch.arange(n, dtype=torch.float64) + 0.5) / n
    dc = torch.ones(n, n, dtype=torch.float64)
    vert = torch.cos(math.pi * coords)[:, None].expand(n, n)
    horiz = torch.cos(math.pi * coords)[None, :].expand(n, n)
    luma = torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64) / math.sqrt(3)
    chroma = torch.tensor([1.0, 0.0, -1.0], dtype=torch.float64) / math.sqrt(2)
    rows = [
        luma[:, None, None] * dc,
        luma[:, None, None] * vert,
        luma[:, None, None] * horiz,
        chroma[:, None, None] * dc,
    ]
    basis = torch.stack(rows)  # (4, 3, n, n)
    return basis / basis.flatten(1).norm(dim=1)[:, None, None, None]


class PatchProjectionAutoencoder(nn.Module):
    """Linear, parameter-free stand-in for a VAE. ``decode_calls`` counts
    decoder invocations so training code can be instrumented."""

    latent_channels = 4

    def __init__(self, factor: int = 8, scale: float = 0.25):
        super().__init__()
        self.factor = factor
        self.scale = scale
        self.register_buffer("basis", _patch_basis(factor).float(), persistent=False)
        self.decode_calls = 0
        self.decoded_frames = 0

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [-1, 1] -> (B, 4, H/f, W/f)."""
        return F.conv2d(x, self.basis.to(x.dtype), stride=self.factor) * self.scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self.decode_calls += 1
        self.decoded_frames += int(z.shape[0])
        return F.conv_transpose2d(z / self.scale, self.basis.to(z.dtype), stride=self.factor)

    def forward(self, x):
        return self.decode(self.encode(x))

    def reset_counters(self):
        self.decode_calls = 0
        self.decoded_frames = 0


class PretrainedVAEAdapter(nn.Module):
    """Wraps an external VAE exposing ``encode(x).latent_dist`` / ``decode(z).sample``
    (the diffusers AutoencoderKL interface) behind the same encode/decode contract."""

    latent_channels = 4

    def __init__(self, vae, scaling_factor: float = 0.18215, factor: int = 8):
        super().__init__()
        self.vae = vae.eval().requires_grad_(False)
        self.scale = scaling_factor
        self.factor = factor
        self.decode_calls = 0
        self.decoded_frames = 0

    def encode(self, x):
        return self.vae.encode(x).latent_dist.mean * self.scale

    def decode(self, z):
        self.decode_calls += 1
        self.decoded_frames += int(z.shape[0])
        return self.vae.decode(z / self.scale).sample

    def reset_counters(self):
        self.decode_calls = 0
        self.decoded_frames = 0
