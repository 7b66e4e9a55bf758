"""Two-tower sync network: U-Net-encoder style towers (StableSyncNet) or a
plain conv stack in the Wav2Lip style, both ending in a rectified,
l2-normalized embedding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..blocks import Conv2dBN, Downsample, ResBlock, SelfAttention2d, group_norm
from ..errors import ConfigError, NumericError
from ..preprocess import MEL_STEPS_PER_FRAME, N_MELS

EPS = 1e-7
FINAL_RES = 4
SWEEP_EMBED_DIMS = (512, 1024, 2048, 4096, 6144)


@dataclass
class SyncNetConfig:
    input_space: str = "pixel"  # pixel | latent
    frames: int = 16
    embed_dim: int = 2048
    arch: str = "stable"  # stable | wav2lip_baseline
    batch_size: int = 1024
    input_size: int = 256  # pixel side; latent side is input_size // latent_factor
    latent_factor: int = 8
    latent_channels: int = 4
    base_width: int = 64
    blocks_per_stage: int = 2
    attn_max_res: int = 16
    stem_stride: int = 1
    lr: float = 1e-4
    min_lr_ratio: float = 0.0
    warmup_steps: int = 0
    steps: int = 2000
    val_every: int = 100
    val_pairs: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.input_space not in ("pixel", "latent"):
            raise ConfigError(f"input_space must be pixel or latent, got {self.input_space!r}")
        if self.arch not in ("stable", "wav2lip_baseline"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.frames < 1 or self.embed_dim < 1 or self.batch_size < 1:
            raise ConfigError("frames, embed_dim and batch_size must be positive")

    @classmethod
    def toy(cls, **overrides) -> "SyncNetConfig":
        """CPU-sized defaults: 64 px, d=64, 5 frames, batch 64."""
        base = dict(
            input_size=64,
            embed_dim=64,
            frames=5,
            batch_size=64,
            base_width=8,
            blocks_per_stage=1,
            attn_max_res=8,
            stem_stride=2,
            lr=3e-4,
            min_lr_ratio=0.1,
            warmup_steps=100,
            steps=1500,
            val_every=50,
            val_pairs=256,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "SyncNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown syncnet config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def visual_channels(self) -> int:
        per_frame = 3 if self.input_space == "pixel" else self.latent_channels
        return per_frame * self.frames

    @property
    def visual_size(self) -> int:
        if self.input_space == "pixel":
            return self.input_size
        return self.input_size // self.latent_factor

    @property
    def mel_steps(self) -> int:
        return MEL_STEPS_PER_FRAME * self.frames


def _stage_strides(h: int, w: int):
    strides = []
    while h > FINAL_RES or w > FINAL_RES:
        sh = 2 if h > FINAL_RES else 1
        sw = 2 if w > FINAL_RES else 1
        strides.append((sh, sw))
        h, w = math.ceil(h / sh), math.ceil(w / sw)
    return strides


class StableEncoder(nn.Module):
    """Stages of {ResBlock x n, self-attention at low resolution, downsample},
    then global pooling and a linear map to the embedding width."""

    def __init__(self, in_ch, hw, embed_dim, base_width, blocks_per_stage, attn_max_res, stem_stride=1, max_mult=8):
        super().__init__()
        h, w = hw
        self.stem = nn.Conv2d(in_ch, base_width, 3, stride=stem_stride, padding=1)
        h, w = math.ceil(h / stem_stride), math.ceil(w / stem_stride)
        layers = []
        ch = base_width
        for i, stride in enumerate(_stage_strides(h, w)):
            out = base_width * min(2**i, max_mult)
            for _ in range(blocks_per_stage):
                layers.append(ResBlock(ch, out))
                ch = out
            if h * w <= attn_max_res**2:
                layers.append(SelfAttention2d(ch))
            layers.append(Downsample(ch, stride))
            h, w = math.ceil(h / stride[0]), math.ceil(w / stride[1])
        layers.append(ResBlock(ch, ch))
        if h * w <= attn_max_res**2:
            layers.append(SelfAttention2d(ch))
        self.blocks = nn.ModuleList(layers)
        self.norm = group_norm(ch)
        self.proj = nn.Linear(ch, embed_dim)
        self.out_hw = (h, w)

    def forward(self, x):
        x = self.stem(x)
        for blk in self.blocks:
            x = blk(x)
        x = F.silu(self.norm(x)).mean(dim=(2, 3))
        return self.proj(x)


class ConvStackEncoder(nn.Module):
    """Wav2Lip-style conv/BN/ReLU stack, resized to the given input."""

    def __init__(self, in_ch, hw, embed_dim, base_width, stem_stride=1, max_mult=8):
        super().__init__()
        h, w = hw
        layers = [Conv2dBN(in_ch, base_width, 7 if min(h, w) >= 32 else 3, stride=stem_stride, padding=3 if min(h, w) >= 32 else 1)]
        h, w = math.ceil(h / stem_stride), math.ceil(w / stem_stride)
        ch = base_width
        for i, stride in enumerate(_stage_strides(h, w)):
            out = base_width * min(2 ** (i + 1), max_mult)
            layers += [
                Conv2dBN(ch, out, 3, stride=stride, padding=1),
                Conv2dBN(out, out, 3, padding=1, residual=True),
                Conv2dBN(out, out, 3, padding=1, residual=True),
            ]
            ch = out
            h, w = math.ceil(h / stride[0]), math.ceil(w / stride[1])
        layers += [Conv2dBN(ch, ch, (h, w)), nn.Conv2d(ch, embed_dim, 1)]
        self.net = nn.Sequential(*layers)
        self.out_hw = (1, 1)

    def forward(self, x):
        return self.net(x).flatten(1)


def _build(config: SyncNetConfig, in_ch: int, hw):
    if min(hw) < 1:
        raise ConfigError(f"unsupported input size {hw}")
    if config.arch == "stable":
        return StableEncoder(
            in_ch, hw, config.embed_dim, config.base_width, config.blocks_per_stage, config.attn_max_res,
            stem_stride=config.stem_stride if min(hw) >= 4 * config.stem_stride else 1,
        )
    return ConvStackEncoder(in_ch, hw, config.embed_dim, config.base_width, stem_stride=config.stem_stride if min(hw) >= 4 * config.stem_stride else 1)


def build_visual_encoder(config: SyncNetConfig) -> nn.Module:
    size = config.visual_size
    if config.input_space == "pixel" and (size < FINAL_RES or size & (size - 1)):
        raise ConfigError(f"pixel input size must be a power of two >= {FINAL_RES}, got {size}")
    if config.input_space == "latent" and config.input_size % config.latent_factor:
        raise ConfigError("input_size must be divisible by latent_factor")
    return _build(config, config.visual_channels, (size, size))


def build_audio_encoder(config: SyncNetConfig) -> nn.Module:
    return _build(config, 1, (N_MELS, config.mel_steps))


def normalize_embedding(x: torch.Tensor) -> torch.Tensor:
    """Center across the embedding, rectify, then l2-normalize so cosines lie
    in [0, 1]. Centering keeps at least one coordinate positive unless the
    pre-activation is constant, so the rectifier cannot zero a whole embedding."""
    return F.normalize(F.relu(x - x.mean(dim=-1, keepdim=True)), dim=-1, eps=1e-12)


def similarity_prob(v: torch.Tensor, a: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """q(x=1): clamped cosine of two normalized nonnegative embeddings."""
    nv = v.norm(dim=-1)
    na = a.norm(dim=-1)
    if bool((nv == 0).any()) or bool((na == 0).any()):
        raise NumericError("zero-norm embedding")
    cos = (v * a).sum(-1) / (nv * na)
    return cos.clamp(eps, 1 - eps)


class SyncNet(nn.Module):
    def __init__(self, config: SyncNetConfig):
        super().__init__()
        self.config = config
        self.visual_encoder = build_visual_encoder(config)
        self.audio_encoder = build_audio_encoder(config)

    def embed_visual(self, visual: torch.Tensor) -> torch.Tensor:
        return normalize_embedding(self.visual_encoder(visual))

    def embed_audio(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() == 3:
            mel = mel.unsqueeze(1)
        return normalize_embedding(self.audio_encoder(mel))

    def forward(self, visual, mel):
        return self.embed_visual(visual), self.embed_audio(mel)

    def prob(self, visual, mel) -> torch.Tensor:
        v, a = self(visual, mel)
        return similarity_prob(v, a)
