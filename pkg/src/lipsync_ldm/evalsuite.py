"""Generation metrics: sync confidence, mouth landmark distance, SSIM and
Frechet distances over pluggable embedders."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from skimage.metrics import structural_similarity
from sklearn.covariance import LedoitWolf

from .errors import BoundsError, ConfigError, ShapeError
from .preprocess import DEFAULT_SEARCH_RANGE, LEFT_EYE, MOUTH_POINTS, RIGHT_EYE, SyncScorer, log_mel, offset_profile

SETTINGS = ("reconstruction", "cross_generation")


def sync_confidence(video: np.ndarray, audio: np.ndarray, scorer: SyncScorer, search_range: int = DEFAULT_SEARCH_RANGE, sample_rate: int = 16000, mel=None) -> float:
    """Mean over sliding visual windows of max-minus-median of the log-odds
    offset profile. ``video`` is (N, S, S, 3) aligned crops."""
    video = np.asarray(video)
    if len(video) < scorer.frames + 2 * search_range:
        raise BoundsError(f"clip of {len(video)} frames is too short for window {scorer.frames} and range {search_range}")
    if mel is None:
        mel = log_mel(np.asarray(audio, np.float32), sample_rate)
    prof = offset_profile(video, mel, scorer, search_range, stride=1)
    return float(np.mean(prof.max(axis=1) - np.median(prof, axis=1)))


def sync_offset_accuracy(video, audio, scorer: SyncScorer, search_range: int = DEFAULT_SEARCH_RANGE, mel=None, sample_rate: int = 16000) -> float:
    """Fraction of visual windows whose best-scoring audio shift is zero."""
    if mel is None:
        mel = log_mel(np.asarray(audio, np.float32), sample_rate)
    prof = offset_profile(np.asarray(video), mel, scorer, search_range, stride=1)
    return float(np.mean(prof.argmax(axis=1) == search_range))


def lmd(gen_landmarks: np.ndarray, gt_landmarks: np.ndarray, mouth_points: Sequence[int] = MOUTH_POINTS) -> float:
    """Mean mouth-landmark distance over frames, in units of inter-ocular distance
    measured on the ground truth. Arrays are (N, K, 2) in pixels."""
    if gen_landmarks is None or gt_landmarks is None:
        raise ConfigError("landmarks are required for LMD")
    gen = np.asarray(gen_landmarks, dtype=np.float64)
    gt = np.asarray(gt_landmarks, dtype=np.float64)
    if gen.shape != gt.shape:
        raise ShapeError(f"landmark shapes differ: {gen.shape} vs {gt.shape}")
    if not (np.all(np.isfinite(gen)) and np.all(np.isfinite(gt))):
        raise ConfigError("missing (non-finite) landmarks")
    iod = np.linalg.norm(gt[:, LEFT_EYE] - gt[:, RIGHT_EYE], axis=-1)
    d = np.linalg.norm(gen[:, list(mouth_points)] - gt[:, list(mouth_points)], axis=-1)
    return float(np.mean(d.mean(axis=1) / iod))


def _gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3:
        f = f @ np.array([0.299, 0.587, 0.114])
    return f


def ssim(gen: np.ndarray, gt: np.ndarray, data_range: float = 255.0) -> float:
    """Mean over frames of grayscale SSIM (Gaussian window, K1=0.01, K2=0.03).
    Accepts a single frame (H, W[, 3]) or a stack (N, H, W[, 3])."""
    gen = np.asarray(gen)
    gt = np.asarray(gt)
    if gen.shape != gt.shape:
        raise ShapeError(f"frame shapes differ: {gen.shape} vs {gt.shape}")
    if gen.ndim == 2 or (gen.ndim == 3 and gen.shape[-1] == 3):
        gen, gt = gen[None], gt[None]
    vals = [
        structural_similarity(_gray(a), _gray(b), data_range=data_range, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        for a, b in zip(gen, gt)
    ]
    return float(np.mean(vals))


def gaussian_fit(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    mu = x.mean(axis=0)
    if n <= d:
        warnings.warn(f"{n} samples for {d}-dim embeddings: covariance is ill-conditioned, using Ledoit-Wolf shrinkage", stacklevel=3)
        cov = LedoitWolf().fit(x).covariance_
    else:
        cov = np.cov(x, rowvar=False)
    return mu, np.atleast_2d(cov)


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2))."""
    diff = np.asarray(mu1) - np.asarray(mu2)
    covmean, _ = scipy.linalg.sqrtm(cov1 @ cov2, disp=False)
    if not np.all(np.isfinite(covmean)):
        off = np.eye(len(cov1)) * 1e-6
        covmean = scipy.linalg.sqrtm((cov1 + off) @ (cov2 + off))
    covmean = np.real(covmean)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))


class RandomProjectionEmbedder:
    """Toy embedder: fixed Gaussian projection of flattened (resized) inputs."""

    def __init__(self, dim: int = 16, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._proj = {}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1) / 255.0
        d = x.shape[1]
        if d not in self._proj:
            rng = np.random.default_rng(self.seed)
            self._proj[d] = rng.normal(0, 1 / np.sqrt(d), (d, self.dim))
        return x @ self._proj[d]


def distributional_metric(gen_set, ref_set, embedder: Optional[Callable] = None, kind: str = "image") -> float:
    """Frechet distance between Gaussian fits of embeddings. ``kind='image'``
    embeds frames (..., H, W, 3) individually; ``kind='video'`` embeds whole
    clips (N, L, H, W, 3). ``embedder=None`` treats inputs as embeddings."""
    if kind not in ("image", "video", "embedding"):
        raise ConfigError(f"unknown kind {kind!r}")
    gen_set = np.asarray(gen_set)
    ref_set = np.asarray(ref_set)
    if embedder is None:
        eg, er = gen_set, ref_set
    elif kind == "image":
        eg = embedder(gen_set.reshape(-1, *gen_set.shape[-3:]))
        er = embedder(ref_set.reshape(-1, *ref_set.shape[-3:]))
    else:
        eg, er = embedder(gen_set), embedder(ref_set)
    mu1, c1 = gaussian_fit(eg)
    mu2, c2 = gaussian_fit(er)
    return frechet_distance(mu1, c1, mu2, c2)


@dataclass
class MetricReport:
    setting: str
    per_clip: dict = field(default_factory=dict)  # metric -> list of per-clip scores
    extra: dict = field(default_factory=dict)  # corpus-level metrics (fid, fvd)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}")

    def add(self, metric: str, value: float):
        self.per_clip.setdefault(metric, []).append(float(value))

    @property
    def aggregates(self) -> dict:
        out = {k: float(np.mean(v)) for k, v in self.per_clip.items()}
        out.update({k: float(v) for k, v in self.extra.items()})
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregates"] = self.aggregates
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def table(self) -> str:
        keys = ("sync_conf", "lmd", "ssim", "fid", "fvd")
        agg = self.aggregates
        head = "| setting | " + " | ".join(keys) + " |"
        sep = "|" + "---|" * (len(keys) + 1)
        row = f"| {self.setting} | " + " | ".join(f"{agg[k]:.4f}" if k in agg else "-" for k in keys) + " |"
        return "\n".join([head, sep, row])


def evaluate_clips(gen_clips, gt_clips, scorer: Optional[SyncScorer] = None, setting: str = "reconstruction", embedder=None) -> MetricReport:
    """Per-clip metrics on aligned crops. SSIM and LMD need ground truth and are
    only reported in the reconstruction setting."""
    report = MetricReport(setting)
    for g, r in zip(gen_clips, gt_clips):
        if scorer is not None:
            report.add("sync_conf", sync_confidence(g.frames, g.audio, scorer, sample_rate=g.sample_rate))
        if setting == "reconstruction":
            report.add("ssim", ssim(g.frames, r.frames))
            if g.landmarks is not None and r.landmarks is not None:
                report.add("lmd", lmd(g.landmarks, r.landmarks))
    if embedder is not None:
        gen = np.concatenate([g.frames for g in gen_clips])
        ref = np.concatenate([r.frames for r in gt_clips])
        report.extra["fid"] = distributional_metric(gen, ref, embedder, "image")
    return report
