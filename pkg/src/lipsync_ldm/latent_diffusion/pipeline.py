"""Inference: frontalize, mask, denoise 16-frame windows, decode, paste back."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from ..errors import ConfigError
from ..preprocess import FPS, AffineTransform, AVClip, MaskSpec, fit_audio_length, frontalize_clip, log_mel, mask_channel, paste_back
from ..stablesyncnet.data import frames_to_tensor, normalize_mel
from .audio import audio_context
from .sampling import DEFAULT_DDIM_STEPS, Conditions, ddim_sample, downsample_mask
from .schedule import NoiseSchedule


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """(N, 3, S, S) in [-1, 1] -> (N, S, S, 3) uint8."""
    x = ((pixels.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


@torch.no_grad()
def generate_crops(
    model,
    schedule: NoiseSchedule,
    autoencoder,
    crops: np.ndarray,
    mel: np.ndarray,
    mask_spec: MaskSpec,
    steps: int = DEFAULT_DDIM_STEPS,
    seed: int = 0,
    window: int = 16,
    reference: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Inpaint the masked region of aligned crops (N, S, S, 3) driven by the
    log-mel ``mel`` (80, 4N). References default to the current frames.
    Pixels outside the mask are returned unchanged."""
    n, size = len(crops), crops.shape[1]
    if mel.shape[-1] < 4 * n:
        raise ConfigError(f"mel covers {mel.shape[-1] // 4} frames, clip has {n}")
    model.eval()
    px = frames_to_tensor(crops)
    m = torch.tensor(mask_channel(mask_spec, size))
    masked = autoencoder.encode(px * (1.0 - m))
    ref = autoencoder.encode(frames_to_tensor(reference) if reference is not None else px)
    mask_lat = downsample_mask(m, autoencoder.factor)
    embeds = model.audio_encoder(torch.from_numpy(normalize_mel(mel[:, : 4 * n])).float())
    context = audio_context(embeds, model.config.audio_window)
    out = crops.copy()
    for k, s in enumerate(range(0, n, window)):
        sl = slice(s, min(n, s + window))
        length = sl.stop - sl.start
        cond = Conditions(
            mask_lat.expand(length, -1, -1, -1),
            masked[sl],
            ref[sl],
            context[sl],
            length if model.temporal is not None else None,
        )
        z0 = ddim_sample(model, cond, schedule, steps, seed + k)
        gen = to_uint8(autoencoder.decode(z0)).astype(np.float32)
        alpha = m.numpy()[None, ..., None]
        blend = alpha * gen + (1.0 - alpha) * crops[sl].astype(np.float32)
        out[sl] = np.clip(np.round(blend), 0, 255).astype(np.uint8)
    return out


def lipsync_video(
    clip: AVClip,
    audio: np.ndarray,
    model,
    schedule: NoiseSchedule,
    autoencoder,
    mask_spec: MaskSpec,
    crop_size: int = 64,
    steps: int = DEFAULT_DDIM_STEPS,
    seed: int = 0,
) -> AVClip:
    """Re-render the mouth of ``clip`` to match ``audio`` (16 kHz). Only pixels
    under the warped mask change; the result carries the driving audio at 25 fps."""
    if clip.fps != FPS:
        raise ConfigError(f"inference expects {FPS} fps input, got {clip.fps}")
    audio = fit_audio_length(np.asarray(audio, np.float32), clip.n_frames)
    crop_clip = frontalize_clip(clip, crop_size)
    gen = generate_crops(model, schedule, autoencoder, crop_clip.frames, log_mel(audio, clip.sample_rate), mask_spec, steps, seed)
    alpha = mask_channel(mask_spec, crop_size)
    frames = np.stack(
        [
            paste_back(g, AffineTransform(mat, crop_size), f, alpha=alpha)
            for g, mat, f in zip(gen, crop_clip.meta["transforms"], clip.frames)
        ]
    )
    meta = dict(clip.meta)
    meta["driving_audio"] = True
    return clip.replace(frames=frames, audio=audio, meta=meta)
