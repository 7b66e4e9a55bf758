"""Contrastive training, checkpoints, convergence diagnostics and the
scorer adapter used for offset scanning and sync confidence."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, TrainingDiverged
from .data import SyncBatch, SyncCorpus, draw_pair_specs, frames_to_tensor, materialize, normalize_mel, sample_pairs
from .model import SyncNet, SyncNetConfig

log = logging.getLogger(__name__)

STUCK, CONVERGING, DIVERGED = "STUCK", "CONVERGING", "DIVERGED"


def bce(q: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """-(1/N) sum [y log q + (1-y) log(1-q)]."""
    if q.numel() == 0:
        raise ValueError("empty batch")
    labels = labels.to(q.dtype)
    return -(labels * torch.log(q) + (1 - labels) * torch.log1p(-q)).mean()


def contrastive_loss(batch: SyncBatch, model: SyncNet) -> torch.Tensor:
    if len(batch) == 0:
        raise ValueError("empty batch")
    return bce(model.prob(batch.visual, batch.mel), batch.labels)


@dataclass
class Curves:
    train: list = field(default_factory=list)  # (step, loss)
    val: list = field(default_factory=list)  # (step, loss)

    def train_losses(self) -> np.ndarray:
        return np.array([l for _, l in self.train])

    def val_losses(self) -> np.ndarray:
        return np.array([l for _, l in self.val])

    def final_val(self) -> float:
        return float(self.val[-1][1]) if self.val else float("nan")

    def best_val(self) -> float:
        return float(min(l for _, l in self.val)) if self.val else float("nan")

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "split", "loss"])
            for s, l in self.train:
                w.writerow([s, "train", f"{l:.6f}"])
            for s, l in self.val:
                w.writerow([s, "val", f"{l:.6f}"])
        return path

    @classmethod
    def read_csv(cls, path) -> "Curves":
        c = cls()
        for row in csv.DictReader(open(path)):
            (c.train if row["split"] == "train" else c.val).append((int(row["step"]), float(row["loss"])))
        return c


def trailing_mean(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return values
    csum = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)


def save_checkpoint(path, model: SyncNet, step: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"kind": "syncnet", "config": model.config.to_dict(), "state_dict": model.state_dict(), "step": step}
    payload.update(extra or {})
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> SyncNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "syncnet":
        raise ConfigError(f"{path} is not a syncnet checkpoint")
    model = SyncNet(SyncNetConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def make_val_set(corpus: SyncCorpus, n_pairs: int, seed: int) -> SyncBatch:
    rng = np.random.default_rng(seed)
    return materialize(corpus, *draw_pair_specs(corpus, n_pairs, rng))


@torch.no_grad()
def predict(model: SyncNet, batch: SyncBatch, chunk: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = torch.cat([model.prob(batch.visual[i : i + chunk], batch.mel[i : i + chunk]) for i in range(0, len(batch), chunk)])
    model.train(was_training)
    return out


def evaluate_loss(model: SyncNet, batch: SyncBatch) -> float:
    return float(bce(predict(model, batch), batch.labels))


def evaluate_accuracy(model: SyncNet, testset: SyncBatch) -> float:
    if len(testset) == 0:
        raise ValueError("empty test set")
    q = predict(model, testset)
    return float(((q > 0.5).float() == testset.labels).float().mean())


def lr_factor(step: int, config: SyncNetConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio``."""
    if step < config.warmup_steps:
        return (step + 1) / config.warmup_steps
    span = max(1, config.steps - config.warmup_steps)
    frac = min(1.0, (step - config.warmup_steps) / span)
    return config.min_lr_ratio + (1 - config.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac))


def train_syncnet(
    config: SyncNetConfig,
    corpus: SyncCorpus,
    val_corpus: Optional[SyncCorpus] = None,
    run_dir=None,
    label_shuffle: bool = False,
    scatter_every: Optional[int] = None,
    scatter_batch: Optional[SyncBatch] = None,
):
    """Train with BCE on balanced pairs. Returns (model at best val, Curves, scatter records).

    With ``run_dir`` the best-validation checkpoint and a curve CSV are written there.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if corpus.frames != config.frames:
        raise ConfigError(f"corpus windows have {corpus.frames} frames, config expects {config.frames}")
    model = SyncNet(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: lr_factor(i, config))
    val_set = make_val_set(val_corpus or corpus, config.val_pairs, config.seed + 10_000)
    if label_shuffle:
        val_set.labels = val_set.labels[torch.from_numpy(np.random.default_rng(config.seed + 1).permutation(len(val_set)))]
    curves = Curves()
    scatter = []
    best = (math.inf, None, 0)
    run_dir = Path(run_dir) if run_dir else None
    model.train()
    for step in range(1, config.steps + 1):
        batch = sample_pairs(corpus, config.batch_size, rng)
        if label_shuffle:
            batch.labels = batch.labels[torch.from_numpy(rng.permutation(len(batch)))]
        loss = contrastive_loss(batch, model)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"syncnet loss became {loss.item()} at step {step}", component="syncnet")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        curves.train.append((step, loss.item()))
        if scatter_every and step % scatter_every == 0:
            scatter += dump_probability_scatter(model, scatter_batch if scatter_batch is not None else batch, step)
        if step % config.val_every == 0 or step == config.steps:
            vloss = evaluate_loss(model, val_set)
            curves.val.append((step, vloss))
            if vloss < best[0]:
                best = (vloss, {k: v.detach().clone() for k, v in model.state_dict().items()}, step)
                if run_dir:
                    save_checkpoint(run_dir / "syncnet_best.pt", model, step, {"val_loss": vloss})
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        curves.write_csv(run_dir / "curves.csv")
        if scatter:
            write_scatter_csv(scatter, run_dir / "scatter.csv")
    return model, curves, scatter


def detect_loss_floor(curve, window: Optional[int] = None, floor=(0.68, 0.70), slope_tol: float = 1e-5) -> str:
    """Classify a training curve as STUCK at ln 2, CONVERGING or DIVERGED."""
    losses = np.asarray([c[1] if isinstance(c, tuple) else c for c in curve], dtype=np.float64)
    if len(losses) < 500:
        raise ValueError("need at least 500 steps of curve")
    if not np.all(np.isfinite(losses)):
        return DIVERGED
    window = window or max(100, len(losses) // 5)
    tail = losses[-window:]
    mean = tail.mean()
    slope = np.polyfit(np.arange(len(tail)), tail, 1)[0]
    if floor[0] <= mean <= floor[1] and abs(slope) < slope_tol * 10:
        return STUCK
    if mean > floor[1] and (slope > slope_tol or mean > 1.0):
        return DIVERGED
    return CONVERGING


@torch.no_grad()
def dump_probability_scatter(model: SyncNet, batch: SyncBatch, step: int) -> list:
    q = predict(model, batch)
    return [{"step": int(step), "sample_id": i, "q": float(v)} for i, v in enumerate(q.tolist())]


def write_scatter_csv(records: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "sample_id", "q"])
        w.writeheader()
        w.writerows(records)
    return path


class SyncNetScorer:
    """Adapts a trained SyncNet to the numpy scorer protocol used by offset
    scanning and sync confidence. Latent-space networks need ``encoder``."""

    def __init__(self, model: SyncNet, encoder=None, chunk: int = 256):
        self.model = model.eval()
        self.config = model.config
        self.frames = model.config.frames
        self.encoder = encoder
        self.chunk = chunk
        if self.config.input_space == "latent" and encoder is None:
            raise ConfigError("latent-space scorer needs an encoder")

    @torch.no_grad()
    def embed_visual(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows)
        b, f = windows.shape[:2]
        out = []
        for i in range(0, b, self.chunk):
            x = frames_to_tensor(windows[i : i + self.chunk], self.config.input_size)  # (b, F, 3, S, S)
            if self.encoder is not None:
                n = x.shape[0]
                x = self.encoder(x.flatten(0, 1)).reshape(n, f, *self.encoder_shape(x))
            out.append(self.model.embed_visual(x.flatten(1, 2)))
        return torch.cat(out).numpy()

    def encoder_shape(self, x):
        s = self.config.visual_size
        return (self.config.latent_channels, s, s)

    @torch.no_grad()
    def embed_audio(self, mels: np.ndarray) -> np.ndarray:
        mels = normalize_mel(np.asarray(mels, dtype=np.float32))
        out = [self.model.embed_audio(torch.from_numpy(mels[i : i + self.chunk]).unsqueeze(1)) for i in range(0, len(mels), self.chunk)]
        return torch.cat(out).numpy()
