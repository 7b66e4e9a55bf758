"""Stage-2 objectives: noise MSE, decoded-pixel sync loss, perceptual loss,
temporal representation alignment (TREPA) and their weighted sum.

The perceptual and video feature networks here are fixed random networks
that run at whatever dtype they are given, so losses can be gradient-checked
in float64. Pretrained feature extractors plug in through the same call
signatures.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError

LOSS_NAMES = ("simple", "sync", "lpips", "trepa")


@dataclass
class LossWeights:
    simple: float = 1.0
    sync: float = 0.05
    lpips: float = 0.1
    trepa: float = 0.1

    def __post_init__(self):
        for name in LOSS_NAMES:
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"loss weight {name} must be a finite nonnegative number, got {v}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "LossWeights":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def enabled(self) -> set:
        return {n for n in LOSS_NAMES if getattr(self, n) > 0}


def simple_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_pred.shape:
        raise ShapeError(f"noise shapes differ: {tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    return F.mse_loss(eps_pred, eps)


# ------------------------------------------------------------------- sync


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def sync_windows(frames: torch.Tensor, mel: torch.Tensor, window: int):
    """Slice a (B, L, C, h, w) clip and its (B, 80, 4L) mel into every
    ``window``-frame sub-window: (B*(L-window+1), window*C, h, w), (.., 1, 80, 4*window)."""
    b, length = frames.shape[:2]
    if length < window:
        raise ShapeError(f"clip of {length} frames is shorter than the {window}-frame sync window")
    if mel.dim() == 4:
        mel = mel.squeeze(1)
    steps = mel.shape[-1] // length
    if mel.shape[-1] != steps * length:
        raise ShapeError("mel length is not a whole number of steps per frame")
    n = length - window + 1
    vis = torch.stack([frames[:, s : s + window].flatten(1, 2) for s in range(n)], dim=1).flatten(0, 1)
    aud = torch.stack([mel[..., s * steps : (s + window) * steps] for s in range(n)], dim=1).flatten(0, 1)
    return vis, aud.unsqueeze(1)


def sync_loss(frames: torch.Tensor, mel: torch.Tensor, syncnet, space: str = "pixel") -> torch.Tensor:
    """BCE of the frozen sync network's similarity against the in-sync label,
    averaged over every sub-window the network's frame count fits into.

    ``frames`` are decoded pixels (B, L, 3, S, S) in [-1, 1] for a pixel
    network or latents (B, L, 4, h, w) for a latent network; ``mel`` is the
    normalized log-mel (B, 80, 4L).
    """
    cfg = syncnet.config
    if space != cfg.input_space:
        raise ConfigError(f"{space}-space frames given to a {cfg.input_space}-space sync network")
    if frames.shape[-1] != cfg.visual_size:
        raise ShapeError(f"sync network expects side {cfg.visual_size}, got {frames.shape[-1]}")
    freeze(syncnet)
    vis, aud = sync_windows(frames, mel, cfg.frames)
    q = syncnet.prob(vis, aud.to(vis.dtype))
    return -torch.log(q).mean()


# -------------------------------------------------------------- perceptual


class IdentityFeatures(nn.Module):
    impl_id = "identity"

    def forward(self, x):
        return [x]


class RandomConvFeatures(nn.Module):
    """Fixed random conv-SiLU stack; each layer's output is a tap."""

    impl_id = "random_conv"

    def __init__(self, channels: Sequence[int] = (16, 32, 32), taps: Sequence[int] = (1, 2), seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        prev = 3
        for i, c in enumerate(channels):
            w = torch.randn(c, prev, 3, 3, generator=g) * math.sqrt(2.0 / (prev * 9))
            self.register_buffer(f"w{i}", w)
            prev = c
        self.n_layers = len(channels)
        self.taps = tuple(taps)
        if any(t < 0 or t >= self.n_layers for t in self.taps):
            raise ConfigError(f"taps {self.taps} outside 0..{self.n_layers - 1}")

    def forward(self, x):
        feats = []
        h = x
        for i in range(self.n_layers):
            w = getattr(self, f"w{i}").to(h.dtype)
            h = F.silu(F.conv2d(h, w, padding=1, stride=2 if i else 1))
            if i in self.taps:
                feats.append(h)
        return feats


def lpips_loss(decoded: torch.Tensor, target: torch.Tensor, featnet: nn.Module) -> torch.Tensor:
    """Sum over taps of feature MSE, computed per frame and averaged over frames.
    Accepts (N, 3, H, W) or (B, L, 3, H, W)."""
    if decoded.shape != target.shape:
        raise ShapeError(f"frame shapes differ: {tuple(decoded.shape)} vs {tuple(target.shape)}")
    x = decoded.reshape(-1, *decoded.shape[-3:])
    y = target.reshape(-1, *target.shape[-3:])
    total = 0.0
    for fx, fy in zip(featnet(x), featnet(y)):
        total = total + ((fx - fy) ** 2).flatten(1).mean(1)
    return total.mean()


# ------------------------------------------------------------------- trepa


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(100.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    out = torch.zeros(n, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(pos * freq)
    out[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return out


class TemporalVideoEncoder(nn.Module):
    """Fixed random clip encoder: per-frame conv features, position encoding,
    a temporal convolution and one self-attention mixing step."""

    impl_id = "random_temporal"

    def __init__(self, dim: int = 64, clip_len: int = 16, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.clip_len = clip_len
        self.register_buffer("w_conv1", torch.randn(16, 3, 3, 3, generator=g) * math.sqrt(2.0 / 27))
        self.register_buffer("w_conv2", torch.randn(dim, 16, 3, 3, generator=g) * math.sqrt(2.0 / 144))
        self.register_buffer("pos", sinusoidal_positions(clip_len, dim).float())
        self.register_buffer("w_time", torch.randn(dim, dim, 3, generator=g) * math.sqrt(1.0 / (3 * dim)))
        self.register_buffer("w_qkv", torch.randn(3 * dim, dim, generator=g) / math.sqrt(dim))

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        """(B, L, 3, H, W) -> (B, dim)."""
        b, length = clip.shape[:2]
        if length > self.clip_len:
            raise ShapeError(f"clip of {length} frames exceeds encoder length {self.clip_len}")
        dt = clip.dtype
        x = clip.reshape(b * length, *clip.shape[2:])
        x = F.silu(F.conv2d(x, self.w_conv1.to(dt), stride=2, padding=1))
        x = F.silu(F.conv2d(x, self.w_conv2.to(dt), stride=2, padding=1)).mean(dim=(2, 3))
        h = x.reshape(b, length, self.dim) + self.pos[:length].to(dt)
        h = h + F.silu(F.conv1d(h.transpose(1, 2), self.w_time.to(dt), padding=1)).transpose(1, 2)
        q, k, v = (h @ self.w_qkv.to(dt).T).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.dim), dim=-1)
        h = h + attn @ v
        return h.mean(dim=1)


def unit_normalize(e: torch.Tensor) -> torch.Tensor:
    n = e.norm(dim=-1, keepdim=True)
    if bool((n == 0).any()):
        raise NumericError("zero-norm video embedding")
    return e / n


def trepa_loss(decoded_seq: torch.Tensor, target_seq: torch.Tensor, videnc: nn.Module) -> torch.Tensor:
    """MSE between l2-normalized clip embeddings of generated and real frames."""
    if decoded_seq.shape != target_seq.shape:
        raise ShapeError(f"clip shapes differ: {tuple(decoded_seq.shape)} vs {tuple(target_seq.shape)}")
    e1 = unit_normalize(videnc(decoded_seq))
    e2 = unit_normalize(videnc(target_seq))
    ones = torch.ones(e1.shape[0], dtype=e1.dtype)
    assert torch.allclose(e1.norm(dim=-1), ones, atol=1e-5) and torch.allclose(e2.norm(dim=-1), ones, atol=1e-5)
    return ((e1 - e2) ** 2).mean()


# ------------------------------------------------------------------- total


def total_loss(components: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the named components. A non-finite component aborts with its name;
    components whose weight is zero may be omitted."""
    total = 0.0
    for name in LOSS_NAMES:
        w = getattr(weights, name)
        if name not in components:
            if w > 0:
                raise ConfigError(f"loss component {name!r} missing with weight {w}")
            continue
        value = components[name]
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NumericError(f"loss component {name!r} is not finite")
        total = total + w * value
    return total


# ------------------------------------------------------------ grad checks


def gradient_relative_error(fn, x: torch.Tensor, h: float = 1e-6) -> float:
    """||g_autograd - g_fd|| / ||g_fd|| for scalar ``fn`` at ``x`` using central differences."""
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    fd = torch.zeros_like(x)
    flat = fd.view(-1)
    base = x.detach().clone()
    with torch.no_grad():
        for i in range(base.numel()):
            xp = base.clone()
            xp.view(-1)[i] += h
            xm = base.clone()
            xm.view(-1)[i] -= h
            flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    denom = fd.norm()
    if denom == 0:
        raise NumericError("finite-difference gradient is zero")
    return float((g - fd).norm() / denom)
