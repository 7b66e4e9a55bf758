"""Toy conditional inpainting U-Net with the 13-channel input contract,
audio cross-attention and an optional temporal layer.

Top-level child modules double as parameter groups: conv_in, time_embed,
down, mid, up, audio_cross_attention, temporal, conv_out, audio_encoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..blocks import Downsample, ResBlock, Upsample, group_norm, timestep_embedding
from ..errors import ConfigError, IncompatibleWeights, ShapeError
from .audio import CONTEXT_DIM, MelFrameEncoder

LATENT_CHANNELS = 4
IN_CHANNELS = 13
PARAM_GROUPS = ("conv_in", "time_embed", "down", "mid", "up", "audio_cross_attention", "temporal", "conv_out", "audio_encoder")
# freshly initialized even when pretrained weights are supplied
REINIT_GROUPS = ("conv_in", "audio_cross_attention")


@dataclass
class UNetConfig:
    width: int = 64
    context_dim: int = CONTEXT_DIM
    heads: int = 4
    audio_window: int = 2  # m: the context holds 2m+1 frames
    temporal: bool = False
    max_frames: int = 16

    @classmethod
    def from_dict(cls, data: dict) -> "UNetConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown unet config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class CrossAttention(nn.Module):
    """Spatial tokens attend to the audio context. A learned embedding per
    window slot tells the centre frame apart from its neighbours."""

    def __init__(self, channels: int, context_dim: int, heads: int, context_len: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.slot = nn.Parameter(torch.randn(context_len, context_dim) * 0.02)
        self.attn = nn.MultiheadAttention(channels, heads, kdim=context_dim, vdim=context_dim, batch_first=True)

    def forward(self, x, context):
        b, c, h, w = x.shape
        if context.shape[1] != self.slot.shape[0]:
            raise ShapeError(f"context of {context.shape[1]} frames, expected {self.slot.shape[0]}")
        q = self.norm(x).flatten(2).transpose(1, 2)
        kv = context + self.slot
        out, _ = self.attn(q, kv, kv, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class TemporalAttention(nn.Module):
    """Self-attention along the frame axis at every spatial location, with a
    learnable position encoding. The output projection starts at zero so an
    inserted layer is initially the identity."""

    def __init__(self, channels: int, heads: int, max_frames: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.pos = nn.Parameter(torch.randn(max_frames, channels) * 0.02)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        nn.init.zeros_(self.attn.out_proj.weight)
        nn.init.zeros_(self.attn.out_proj.bias)

    def forward(self, x, n_frames: int):
        bf, c, h, w = x.shape
        if bf % n_frames:
            raise ShapeError(f"batch {bf} is not a multiple of {n_frames} frames")
        if n_frames > self.pos.shape[0]:
            raise ShapeError(f"{n_frames} frames exceed the position table ({self.pos.shape[0]})")
        b = bf // n_frames
        t = self.norm(x).reshape(b, n_frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, n_frames, c)
        t = t + self.pos[:n_frames]
        out, _ = self.attn(t, t, t, need_weights=False)
        out = out.reshape(b, h * w, n_frames, c).permute(0, 2, 3, 1).reshape(bf, c, h, w)
        return x + out


class InpaintingUNet(nn.Module):
    def __init__(self, config: Optional[UNetConfig] = None):
        super().__init__()
        self.config = config = config or UNetConfig()
        w, ctx, heads = config.width, config.context_dim, config.heads
        n_ctx = 2 * config.audio_window + 1
        tdim = 4 * w
        self.conv_in = nn.Conv2d(IN_CHANNELS, w, 3, padding=1)
        self.time_embed = nn.Sequential(nn.Linear(w, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.down = nn.ModuleList([ResBlock(w, w, tdim), Downsample(w)])
        self.mid = nn.ModuleList([ResBlock(w, 2 * w, tdim), ResBlock(2 * w, 2 * w, tdim)])
        self.up = nn.ModuleList([Upsample(2 * w), ResBlock(3 * w, w, tdim), ResBlock(w, w, tdim)])
        self.audio_cross_attention = nn.ModuleDict(
            {
                "down": CrossAttention(w, ctx, heads, n_ctx),
                "mid": CrossAttention(2 * w, ctx, heads, n_ctx),
                "up": CrossAttention(w, ctx, heads, n_ctx),
            }
        )
        self.temporal = None
        if config.temporal:
            self.add_temporal_layers()
        self.conv_out = nn.Sequential(group_norm(w), nn.SiLU(), nn.Conv2d(w, LATENT_CHANNELS, 3, padding=1))
        self.audio_encoder = MelFrameEncoder(ctx)

    def add_temporal_layers(self):
        w, heads = self.config.width, self.config.heads
        self.temporal = nn.ModuleDict(
            {
                "mid": TemporalAttention(2 * w, heads, self.config.max_frames),
                "up": TemporalAttention(w, heads, self.config.max_frames),
            }
        )
        self.config.temporal = True
        return self

    def _temporal(self, key, h, n_frames):
        if self.temporal is None or n_frames is None:
            return h
        return self.temporal[key](h, n_frames)

    def forward(self, x, t, context, n_frames: Optional[int] = None):
        """x (N, 13, h, w), t (N,), context (N, 2m+1, context_dim) -> eps (N, 4, h, w).
        ``n_frames`` groups the batch into clips for the temporal layer."""
        if x.dim() != 4 or x.shape[1] != IN_CHANNELS:
            raise ShapeError(f"expected (N, {IN_CHANNELS}, h, w) input, got {tuple(x.shape)}")
        if context.dim() != 3 or context.shape[0] != x.shape[0] or context.shape[-1] != self.config.context_dim:
            raise ShapeError(f"context must be (N, L, {self.config.context_dim}), got {tuple(context.shape)}")
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ShapeError("latent side must be even")
        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(x.shape[0])
        temb = self.time_embed(timestep_embedding(t, self.config.width))
        xa = self.audio_cross_attention

        h = self.conv_in(x)
        h = self.down[0](h, temb)
        h = xa["down"](h, context)
        skip = h
        h = self.down[1](h)
        h = self.mid[0](h, temb)
        h = xa["mid"](h, context)
        h = self._temporal("mid", h, n_frames)
        h = self.mid[1](h, temb)
        h = self.up[0](h)
        h = self.up[1](torch.cat([h, skip], dim=1), temb)
        h = xa["up"](h, context)
        h = self._temporal("up", h, n_frames)
        h = self.up[2](h, temb)
        return self.conv_out(h)

    # ----------------------------------------------------------- groups

    def parameter_groups(self) -> dict:
        groups = {}
        for name, p in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append((name, p))
        return groups

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups: {sorted(unknown)}")
        for name, p in self.named_parameters():
            p.requires_grad_(name.split(".", 1)[0] in groups)

    def trainable_groups(self) -> set:
        return {name.split(".", 1)[0] for name, p in self.named_parameters() if p.requires_grad}


def predict_noise(model: InpaintingUNet, unet_input, t, audio_window, n_frames=None):
    """eps_theta(z_t, t, tau(A)) for an assembled 13-channel input and its audio windows."""
    if audio_window.dim() == 2:
        audio_window = audio_window.unsqueeze(0).expand(unet_input.shape[0], -1, -1)
    return model(unet_input, t, audio_window, n_frames)


def init_model(config: Optional[UNetConfig] = None, pretrained=None, seed: Optional[int] = None) -> InpaintingUNet:
    """Build the U-Net. With ``pretrained`` (a state dict or a path), copy every
    tensor except conv_in and the audio cross-attention, which keep their fresh
    initialization. Missing or mis-shaped tensors raise IncompatibleWeights."""
    if seed is not None:
        torch.manual_seed(seed)
    model = InpaintingUNet(config)
    if pretrained is None:
        return model
    if isinstance(pretrained, (str, Path)):
        payload = torch.load(pretrained, map_location="cpu", weights_only=False)
        pretrained = payload.get("state_dict", payload) if isinstance(payload, dict) else payload
    if not isinstance(pretrained, dict):
        raise IncompatibleWeights("pretrained weights must be a state dict")
    own = model.state_dict()
    problems = []
    for key, value in own.items():
        if key.split(".", 1)[0] in REINIT_GROUPS:
            continue
        src = pretrained.get(key)
        if src is None:
            problems.append(f"missing {key}")
        elif tuple(src.shape) != tuple(value.shape):
            problems.append(f"{key}: {tuple(src.shape)} vs {tuple(value.shape)}")
    if problems:
        raise IncompatibleWeights("; ".join(problems[:5]))
    with torch.no_grad():
        for key, value in own.items():
            if key.split(".", 1)[0] not in REINIT_GROUPS:
                value.copy_(pretrained[key])
    return model
