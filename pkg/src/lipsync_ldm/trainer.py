"""Two-stage training of the inpainting U-Net.

Stage 1 trains every U-Net weight on the noise MSE alone and never decodes.
Stage 2 inserts the temporal layers, freezes everything except the temporal
and audio cross-attention groups, and adds sync, perceptual and TREPA losses
on frames decoded from the one-step clean-latent estimate.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, IncompatibleWeights, TrainingDiverged
from .latent_diffusion import (
    InpaintingUNet,
    NoiseSchedule,
    PatchProjectionAutoencoder,
    UNetConfig,
    assemble_unet_input,
    audio_context,
    downsample_mask,
    estimate_z0,
    forward_diffuse,
    init_model,
    make_schedule,
)
from .losses import LOSS_NAMES, LossWeights, RandomConvFeatures, TemporalVideoEncoder, lpips_loss, simple_loss, sync_loss, total_loss, trepa_loss
from .preprocess import AVClip, MaskSpec, log_mel, mask_channel
from .stablesyncnet.data import frames_to_tensor, normalize_mel

log = logging.getLogger(__name__)

STAGE2_GROUPS = ("temporal", "audio_cross_attention")
WINDOW = 16


@dataclass
class StageConfig:
    stage: int = 1
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 1  # 16-frame windows per step
    window: int = WINDOW
    seed: int = 0
    grad_clip: float = 1.0
    mask_scale: float = 1.0
    mask_shape: str = "full_face_rounded"
    weights: LossWeights = field(default_factory=lambda: LossWeights(1.0, 0.0, 0.0, 0.0))
    sync_space: str = "pixel"
    schedule: str = "scaled_linear"
    timesteps: int = 1000
    checkpoint_every: int = 0  # 0: only the final checkpoint
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if isinstance(self.unet, dict):
            self.unet = UNetConfig.from_dict(self.unet)
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 1 and self.weights.enabled() != {"simple"}:
            raise ConfigError("stage 1 trains on the simple loss only")
        if self.steps < 0 or self.batch_size < 1 or self.window < 1:
            raise ConfigError("steps, batch_size and window must be positive")
        if self.sync_space not in ("pixel", "latent"):
            raise ConfigError(f"sync_space must be pixel or latent, got {self.sync_space!r}")
        MaskSpec(self.mask_shape, self.mask_scale)

    @classmethod
    def stage1(cls, **kw) -> "StageConfig":
        return cls(stage=1, **kw)

    @classmethod
    def stage2(cls, **kw) -> "StageConfig":
        kw.setdefault("weights", LossWeights())
        kw.setdefault("lr", 5e-4)
        return cls(stage=2, **kw)

    @property
    def mask_spec(self) -> MaskSpec:
        return MaskSpec(self.mask_shape, self.mask_scale)

    @property
    def losses_enabled(self) -> set:
        return self.weights.enabled()

    @classmethod
    def from_dict(cls, data: dict) -> "StageConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ corpus


@dataclass
class DiffusionClip:
    pixels: torch.Tensor  # (N, 3, S, S) in [-1, 1]
    latents: torch.Tensor  # (N, 4, h, w)
    masked_latents: torch.Tensor  # (N, 4, h, w)
    mel: torch.Tensor  # (80, 4N) normalized log-mel
    id: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.latents.shape[0])


class DiffusionCorpus:
    """Frontalized clips pre-encoded for one fixed mask."""

    def __init__(self, clips: Sequence[DiffusionClip], mask: torch.Tensor, mask_spec: MaskSpec):
        self.clips = list(clips)
        self.mask = mask  # (1, 1, h, w) at latent resolution
        self.mask_spec = mask_spec

    def __len__(self):
        return len(self.clips)

    @classmethod
    def from_clips(cls, clips: Sequence[AVClip], autoencoder, mask_spec: MaskSpec, mels=None) -> "DiffusionCorpus":
        out = []
        size = None
        for i, c in enumerate(clips):
            px = frames_to_tensor(c.frames)
            size = px.shape[-1]
            keep = 1.0 - torch.tensor(mask_channel(mask_spec, size))
            with torch.no_grad():
                lat = autoencoder.encode(px)
                masked = autoencoder.encode(px * keep)
            mel = mels[i] if mels is not None else log_mel(c.audio, c.sample_rate)
            out.append(DiffusionClip(px, lat, masked, torch.from_numpy(normalize_mel(mel)).float(), c.id))
        if not out:
            raise ConfigError("empty corpus")
        mask = downsample_mask(mask_channel(mask_spec, size), autoencoder.factor)
        return cls(out, mask, mask_spec)


@dataclass
class Batch:
    pixels: torch.Tensor  # (B, L, 3, S, S)
    latents: torch.Tensor  # (B*L, 4, h, w)
    masked_latents: torch.Tensor
    ref_latents: torch.Tensor
    mel: torch.Tensor  # (B, 80, 4L)
    clip_mel: list  # per-window full-clip mel and frame indices for the context
    frames: list
    mask: Optional[torch.Tensor] = None  # (1, 1, h, w)


def sample_reference_indices(n_frames: int, start: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random frames of the same clip outside [start, start+length)."""
    pool = np.concatenate([np.arange(0, start), np.arange(start + length, n_frames)])
    if len(pool) == 0:
        pool = np.arange(n_frames)
    return rng.choice(pool, size=length)


def sample_batch(corpus: DiffusionCorpus, batch_size: int, window: int, rng: np.random.Generator) -> Batch:
    lengths = np.array([c.n_frames for c in corpus.clips])
    usable = np.flatnonzero(lengths >= window)
    if len(usable) == 0:
        raise ConfigError(f"no clip has {window} frames")
    pix, lat, msk, ref, mel, clip_mel, frames = [], [], [], [], [], [], []
    for _ in range(batch_size):
        c = corpus.clips[int(rng.choice(usable))]
        s = int(rng.integers(0, c.n_frames - window + 1))
        idx = np.arange(s, s + window)
        r = sample_reference_indices(c.n_frames, s, window, rng)
        pix.append(c.pixels[idx])
        lat.append(c.latents[idx])
        msk.append(c.masked_latents[idx])
        ref.append(c.latents[r])
        mel.append(c.mel[:, s * 4 : (s + window) * 4])
        clip_mel.append(c.mel)
        frames.append(idx)
    return Batch(torch.stack(pix), torch.cat(lat), torch.cat(msk), torch.cat(ref), torch.stack(mel), clip_mel, frames, corpus.mask)


def batch_context(model: InpaintingUNet, batch: Batch) -> torch.Tensor:
    m = model.config.audio_window
    ctx = [audio_context(model.audio_encoder(mel), m, idx) for mel, idx in zip(batch.clip_mel, batch.frames)]
    return torch.cat(ctx)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, model: InpaintingUNet, schedule: NoiseSchedule, step: int, stage: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": "unet",
        "stage": stage,
        "step": step,
        "config": model.config.to_dict(),
        "schedule": schedule.to_dict(),
        "state_dict": model.state_dict(),
    }
    payload.update(extra or {})
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """-> (model, schedule, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("kind") != "unet":
        raise IncompatibleWeights(f"{path} is not a U-Net checkpoint")
    try:
        model = InpaintingUNet(UNetConfig.from_dict(payload["config"]))
        model.load_state_dict(payload["state_dict"])
        schedule = NoiseSchedule.from_dict(payload["schedule"])
    except (KeyError, RuntimeError, ConfigError) as exc:
        raise IncompatibleWeights(f"{path}: {exc}") from exc
    return model, schedule, payload


# -------------------------------------------------------------- freezing


def freeze_for_stage2(model: InpaintingUNet, groups: Sequence[str] = STAGE2_GROUPS) -> InpaintingUNet:
    """Insert the temporal layers if absent and leave only ``groups`` trainable."""
    if model.temporal is None:
        model.add_temporal_layers()
    model.set_trainable(groups)
    return model


def snapshot(model: InpaintingUNet) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def changed_groups(before: dict, model: InpaintingUNet) -> set:
    out = set()
    for k, v in model.state_dict().items():
        if k in before and not torch.equal(before[k], v):
            out.add(k.split(".", 1)[0])
    return out


# ----------------------------------------------------------------- training


class LossLog:
    columns = ("step",) + LOSS_NAMES + ("total",)

    def __init__(self):
        self.rows = []

    def append(self, step: int, comps: dict, total: float):
        row = {"step": step, "total": total}
        row.update({n: float(comps[n]) if n in comps else float("nan") for n in LOSS_NAMES})
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            w.writerows(self.rows)
        return path

    @classmethod
    def read_csv(cls, path) -> "LossLog":
        log_ = cls()
        for r in csv.DictReader(open(path)):
            log_.rows.append({k: (int(v) if k == "step" else float(v)) for k, v in r.items()})
        return log_


@dataclass
class TrainResult:
    model: InpaintingUNet
    schedule: NoiseSchedule
    log: LossLog
    checkpoint: Optional[Path] = None


class Supervisors:
    """Frozen networks used by the stage-2 losses."""

    def __init__(self, syncnet=None, featnet=None, videnc=None):
        self.syncnet = syncnet
        self.featnet = featnet if featnet is not None else RandomConvFeatures()
        self.videnc = videnc if videnc is not None else TemporalVideoEncoder()


def _step_losses(model, batch, config, schedule, autoencoder, supervisors, gen_t, rng):
    b, L = config.batch_size, config.window
    t = torch.from_numpy(rng.integers(0, schedule.T, size=b)).repeat_interleave(L)
    eps = torch.randn(batch.latents.shape, generator=gen_t)
    z_t = forward_diffuse(batch.latents, t, eps, schedule)
    x = assemble_unet_input(z_t, batch.mask.expand(z_t.shape[0], -1, -1, -1), batch.masked_latents, batch.ref_latents)
    eps_pred = model(x, t, batch_context(model, batch), L if model.temporal is not None else None)
    comps = {"simple": simple_loss(eps, eps_pred)}
    need = config.weights.enabled() - {"simple"}
    if not need:
        return comps
    z0_hat = estimate_z0(z_t, eps_pred, t, schedule)
    z0_clip = z0_hat.reshape(b, L, *z0_hat.shape[1:])
    decoded = torch.stack([autoencoder.decode(z0_clip[i]) for i in range(b)])  # one decode per window
    if "sync" in need:
        if supervisors.syncnet is None:
            raise ConfigError("sync loss enabled without a sync network")
        frames = decoded if config.sync_space == "pixel" else z0_clip
        comps["sync"] = sync_loss(frames, batch.mel, supervisors.syncnet, config.sync_space)
    if "lpips" in need:
        comps["lpips"] = lpips_loss(decoded, batch.pixels, supervisors.featnet)
    if "trepa" in need:
        comps["trepa"] = trepa_loss(decoded, batch.pixels, supervisors.videnc)
    return comps


def _run(model, config: StageConfig, corpus: DiffusionCorpus, autoencoder, supervisors, run_dir, resume, schedule=None):
    schedule = schedule or make_schedule(config.timesteps, config.schedule)
    rng = np.random.default_rng(config.seed)
    gen_t = torch.Generator().manual_seed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=0.0)
    losslog = LossLog()
    start = 0
    run_dir = Path(run_dir) if run_dir else None
    ckpt_path = run_dir / f"stage{config.stage}.pt" if run_dir else None
    if resume and ckpt_path is not None and ckpt_path.exists():
        _, _, payload = load_checkpoint(ckpt_path)
        if payload.get("stage") != config.stage:
            raise ConfigError(f"{ckpt_path} holds stage {payload.get('stage')}, not {config.stage}")
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        rng.bit_generator.state = payload["rng"]
        gen_t.set_state(payload["torch_rng"])
        losslog.rows = list(payload["log"])
        start = payload["step"]
    model.train()
    autoencoder.reset_counters()
    last_good = ckpt_path if ckpt_path is not None and ckpt_path.exists() else None

    def checkpoint(step):
        extra = {
            "optimizer": opt.state_dict(),
            "rng": rng.bit_generator.state,
            "torch_rng": gen_t.get_state(),
            "log": list(losslog.rows),
            "stage_config": config.to_dict(),
        }
        return save_checkpoint(ckpt_path, model, schedule, step, config.stage, extra)

    for step in range(start + 1, config.steps + 1):
        batch = sample_batch(corpus, config.batch_size, config.window, rng)
        calls_before = autoencoder.decode_calls
        comps = _step_losses(model, batch, config, schedule, autoencoder, supervisors, gen_t, rng)
        try:
            loss = total_loss(comps, config.weights)
        except ArithmeticError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", last_good, component=str(exc).split("'")[1] if "'" in str(exc) else None) from exc
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        if config.stage == 1 and autoencoder.decode_calls != calls_before:
            raise RuntimeError("stage 1 must not decode")
        losslog.append(step, {k: v.item() for k, v in comps.items()}, loss.item())
        if ckpt_path is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            last_good = checkpoint(step)
    model.eval()
    if ckpt_path is not None:
        checkpoint(config.steps)
        losslog.write_csv(run_dir / f"stage{config.stage}_losses.csv")
    return TrainResult(model, schedule, losslog, ckpt_path)


def train_stage1(config: StageConfig, corpus: DiffusionCorpus, autoencoder=None, run_dir=None, resume: bool = False, pretrained=None) -> TrainResult:
    if config.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 config")
    autoencoder = autoencoder or PatchProjectionAutoencoder()
    unet_cfg = UNetConfig.from_dict({**config.unet.to_dict(), "temporal": False})
    model = init_model(unet_cfg, pretrained=pretrained, seed=config.seed)
    model.set_trainable([g for g in model.parameter_groups()])
    return _run(model, config, corpus, autoencoder, Supervisors(), run_dir, resume)


def train_stage2(
    config: StageConfig,
    corpus: DiffusionCorpus,
    stage1,
    syncnet=None,
    autoencoder=None,
    run_dir=None,
    resume: bool = False,
    featnet=None,
    videnc=None,
) -> TrainResult:
    """``stage1`` is a TrainResult, a model or a checkpoint path."""
    if config.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 config")
    if config.weights.sync > 0 and syncnet is None:
        raise ConfigError("stage 2 with a sync weight needs a trained sync network")
    autoencoder = autoencoder or PatchProjectionAutoencoder()
    schedule = None
    if isinstance(stage1, TrainResult):
        src, schedule = stage1.model, stage1.schedule
    elif isinstance(stage1, InpaintingUNet):
        src = stage1
    else:
        src, schedule, _ = load_checkpoint(stage1)
    model = InpaintingUNet(UNetConfig.from_dict(src.config.to_dict()))
    model.load_state_dict(src.state_dict())
    torch.manual_seed(config.seed)
    freeze_for_stage2(model)
    return _run(model, config, corpus, autoencoder, Supervisors(syncnet, featnet, videnc), run_dir, resume, schedule)
