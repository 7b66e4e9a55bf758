"""Per-frame audio embeddings and the windowed cross-attention context."""

from __future__ import annotations

from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError
from ..preprocess import MEL_STEPS_PER_FRAME, N_MELS

CONTEXT_DIM = 384


class AudioExtractor(Protocol):
    """Maps a clip's log-mel (80, 4N) to N per-frame embeddings of width ``dim``."""

    dim: int
    impl_id: str

    def __call__(self, mel: torch.Tensor) -> torch.Tensor: ...


def mel_to_frames(mel) -> torch.Tensor:
    """(..., 80, 4N) -> (..., N, 80, 4)."""
    mel = torch.as_tensor(np.asarray(mel) if not torch.is_tensor(mel) else mel, dtype=torch.float32)
    if mel.shape[-2] != N_MELS or mel.shape[-1] % MEL_STEPS_PER_FRAME:
        raise ShapeError(f"expected (..., {N_MELS}, 4N) mel, got {tuple(mel.shape)}")
    n = mel.shape[-1] // MEL_STEPS_PER_FRAME
    return mel.reshape(*mel.shape[:-1], n, MEL_STEPS_PER_FRAME).movedim(-2, -3)


class MelFrameEncoder(nn.Module):
    """Small trainable extractor: one MLP over each frame's 80x4 normalized mel patch."""

    impl_id = "mel_mlp"

    def __init__(self, dim: int = CONTEXT_DIM, hidden: int = 256):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(
            nn.Linear(N_MELS * MEL_STEPS_PER_FRAME, hidden),
            nn.SiLU(),
            nn.Linear(hidden, dim),
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """Normalized log-mel (..., 80, 4N) -> (..., N, dim)."""
        frames = mel_to_frames(mel)
        return self.norm(self.net(frames.flatten(-2)))


def window_indices(n_frames: int, m: int) -> torch.Tensor:
    """(n_frames, 2m+1) source indices with replicate padding at clip edges."""
    f = torch.arange(n_frames)[:, None] + torch.arange(-m, m + 1)[None, :]
    return f.clamp(0, n_frames - 1)


def build_audio_window(per_frame_embeds: torch.Tensor, f: int, m: int) -> torch.Tensor:
    """The 2m+1 embeddings a^(f-m)..a^(f+m) around frame ``f``."""
    n = per_frame_embeds.shape[0]
    if not 0 <= f < n:
        raise IndexError(f"frame {f} outside clip of {n} frames")
    idx = (torch.arange(f - m, f + m + 1)).clamp(0, n - 1)
    return per_frame_embeds[idx]


def audio_context(per_frame_embeds: torch.Tensor, m: int, frames=None) -> torch.Tensor:
    """Cross-attention context for each requested frame, (len(frames), 2m+1, dim).
    Windows are concatenated along the sequence axis."""
    n = per_frame_embeds.shape[-2]
    idx = window_indices(n, m)
    if frames is not None:
        idx = idx[torch.as_tensor(frames, dtype=torch.long)]
    return per_frame_embeds[..., idx, :]


def pad_context(context: torch.Tensor, dim: int) -> torch.Tensor:
    if context.shape[-1] > dim:
        raise ShapeError(f"context width {context.shape[-1]} exceeds {dim}")
    return F.pad(context, (0, dim - context.shape[-1]))
