"""Positive/negative pair sampling over preprocessed (frontalized) clips."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np
import torch

from ..errors import ConfigError
from ..preprocess import MEL_STEPS_PER_FRAME, AVClip, log_mel


def normalize_mel(logmel):
    """Map log-mel (floor about -11.5) to roughly unit scale for the networks."""
    return (logmel + 6.0) / 4.0


def frames_to_tensor(frames: np.ndarray, size: Optional[int] = None) -> torch.Tensor:
    """(..., H, W, 3) uint8 -> (..., 3, S, S) float in [-1, 1]."""
    frames = np.asarray(frames)
    lead = frames.shape[:-3]
    flat = frames.reshape((-1,) + frames.shape[-3:])
    if size is not None and flat.shape[1] != size:
        flat = np.stack([cv2.resize(f, (size, size), interpolation=cv2.INTER_AREA) for f in flat])
    t = torch.from_numpy(np.ascontiguousarray(flat)).float().div_(127.5).sub_(1.0).permute(0, 3, 1, 2)
    return t.reshape(lead + t.shape[1:])


@dataclass
class SyncClip:
    visual: torch.Tensor  # (N, C, h, w): pixel frames in [-1, 1] or latents
    mel: np.ndarray  # (80, 4N) normalized log-mel
    id: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.visual.shape[0])


@dataclass
class SyncBatch:
    visual: torch.Tensor  # (B, F*C, h, w)
    mel: torch.Tensor  # (B, 1, 80, 4F)
    labels: torch.Tensor  # (B,) float {0, 1}
    clip_index: np.ndarray
    visual_start: np.ndarray
    audio_clip: np.ndarray
    audio_start: np.ndarray

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, idx):
        return SyncBatch(
            self.visual[idx], self.mel[idx], self.labels[idx], self.clip_index[idx],
            self.visual_start[idx], self.audio_clip[idx], self.audio_start[idx],
        )


class SyncCorpus:
    def __init__(self, clips: Sequence[SyncClip], frames: int):
        self.clips = list(clips)
        self.frames = frames

    def __len__(self):
        return len(self.clips)

    @classmethod
    def from_clips(cls, clips: Sequence[AVClip], frames: int, size: int, encoder=None, mels=None) -> "SyncCorpus":
        """Build from frontalized clips. ``encoder`` maps (N, 3, S, S) pixels to
        latents for a latent-space network."""
        out = []
        for i, c in enumerate(clips):
            vis = frames_to_tensor(c.frames, size)
            if encoder is not None:
                with torch.no_grad():
                    vis = torch.cat([encoder(chunk) for chunk in vis.split(256)])
            mel = mels[i] if mels is not None else log_mel(c.audio, c.sample_rate)
            out.append(SyncClip(vis, normalize_mel(mel).astype(np.float32), c.id))
        return cls(out, frames)


def draw_pair_specs(corpus: SyncCorpus, n: int, rng: np.random.Generator):
    """Index-level sampling: each pair positive with p=0.5; negatives are half
    within-clip windows at least F frames away, half cross-clip windows."""
    F = corpus.frames
    lengths = np.array([c.n_frames for c in corpus.clips])
    usable = np.flatnonzero(lengths >= F)
    if len(usable) == 0:
        raise ConfigError("no clip is long enough for one window")
    within_ok = lengths >= 2 * F
    if len(usable) < 2 and not within_ok[usable].any():
        raise ConfigError("corpus too small: need 2 clips or 2 disjoint windows")
    ci = rng.choice(usable, size=n)
    vs = np.array([rng.integers(0, lengths[c] - F + 1) for c in ci])
    labels = (rng.random(n) < 0.5).astype(np.float32)
    ac = ci.copy()
    as_ = vs.copy()
    for i in np.flatnonzero(labels == 0):
        c = ci[i]
        within = within_ok[c] and (len(usable) < 2 or rng.random() < 0.5)
        if within:
            L = lengths[c]
            choices = np.array([s for s in range(L - F + 1) if abs(s - vs[i]) >= F])
            as_[i] = rng.choice(choices)
        else:
            others = usable[usable != c]
            ac[i] = rng.choice(others)
            as_[i] = rng.integers(0, lengths[ac[i]] - F + 1)
    return ci, vs, ac, as_, labels


def sample_pairs(corpus: SyncCorpus, batch_size: int, rng: np.random.Generator) -> SyncBatch:
    ci, vs, ac, as_, labels = draw_pair_specs(corpus, batch_size, rng)
    return materialize(corpus, ci, vs, ac, as_, labels)


def materialize(corpus: SyncCorpus, ci, vs, ac, as_, labels) -> SyncBatch:
    F = corpus.frames
    steps = MEL_STEPS_PER_FRAME
    vis = torch.stack([corpus.clips[c].visual[s : s + F].reshape(-1, *corpus.clips[c].visual.shape[2:]) for c, s in zip(ci, vs)])
    mel = np.stack([corpus.clips[c].mel[:, s * steps : (s + F) * steps] for c, s in zip(ac, as_)])
    return SyncBatch(
        vis,
        torch.from_numpy(mel).unsqueeze(1),
        torch.as_tensor(labels, dtype=torch.float32),
        np.asarray(ci), np.asarray(vs), np.asarray(ac), np.asarray(as_),
    )
