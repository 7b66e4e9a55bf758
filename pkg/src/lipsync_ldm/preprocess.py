"""Clip ingestion and preprocessing: resampling, face frontalization,
paste-back, the fixed inpainting mask, mel features and audio-visual
offset correction.

Geometry conventions: landmarks are stored in normalized image coordinates
(x, y in [0, 1], origin top-left). Pixel ``i`` spans ``[i, i+1)`` in
continuous coordinates, so a normalized coordinate ``u`` on an image of
width ``W`` sits at cv2 pixel-center coordinate ``u * W - 0.5``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

import cv2
import librosa
import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly
from skimage.transform import estimate_transform

from .errors import BoundsError, ConfigError, GeometryError, IngestError, QualityError, ShapeError

log = logging.getLogger(__name__)

FPS = 25
SAMPLE_RATE = 16000
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS  # 640
HOP_LENGTH = 160
WIN_LENGTH = 400
N_MELS = 80
MEL_STEPS_PER_FRAME = SAMPLES_PER_FRAME // HOP_LENGTH  # 4
LOG_FLOOR = float(np.log(1e-5))
DEFAULT_CROP = 256
DEFAULT_SEARCH_RANGE = 15
DEFAULT_CONF_THRESHOLD = 3.0
MAX_MISSING_FACE_FRACTION = 0.2

# Landmark layout. The first five points drive alignment; the lip points
# are only used for mouth metrics.
LEFT_EYE, RIGHT_EYE, NOSE, MOUTH_LEFT, MOUTH_RIGHT, UPPER_LIP, LOWER_LIP = range(7)
ALIGN_POINTS = (LEFT_EYE, RIGHT_EYE, NOSE, MOUTH_LEFT, MOUTH_RIGHT)
MOUTH_POINTS = (MOUTH_LEFT, MOUTH_RIGHT, UPPER_LIP, LOWER_LIP)
N_LANDMARKS = 7

# Canonical positions of the alignment points inside a frontalized crop.
CANONICAL_TEMPLATE = np.array(
    [
        [0.35, 0.40],
        [0.65, 0.40],
        [0.50, 0.56],
        [0.35, 0.74],
        [0.65, 0.74],
    ]
)
MOUTH_CENTER = (0.5, 0.74)


@dataclass
class AVClip:
    frames: np.ndarray  # (N, H, W, 3) uint8
    fps: float
    audio: np.ndarray  # mono float32 in [-1, 1]
    sample_rate: int
    landmarks: Optional[np.ndarray] = None  # (N, K, 2) normalized, NaN rows = no face
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def id(self) -> str:
        return str(self.meta.get("id", "clip"))

    def validate(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"frames must be (N, H, W, 3), got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ShapeError("frames must be uint8")
        if self.fps != FPS or self.sample_rate != SAMPLE_RATE:
            raise IngestError(f"clip must be {FPS} fps / {SAMPLE_RATE} Hz, got {self.fps} / {self.sample_rate}")
        expected = round(self.n_frames / FPS * SAMPLE_RATE)
        if abs(len(self.audio) - expected) > HOP_LENGTH:
            raise IngestError(f"audio has {len(self.audio)} samples, expected {expected}")
        if self.landmarks is not None and len(self.landmarks) != self.n_frames:
            raise ShapeError("landmarks length differs from frame count")
        return self

    def replace(self, **changes) -> "AVClip":
        values = dict(
            frames=self.frames,
            fps=self.fps,
            audio=self.audio,
            sample_rate=self.sample_rate,
            landmarks=self.landmarks,
            meta=dict(self.meta),
        )
        values.update(changes)
        return AVClip(**values)


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray  # 2x3, maps frame pixel coords -> crop pixel coords
    out_size: int = DEFAULT_CROP

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise GeometryError(f"affine matrix must be 2x3, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def inverse(self) -> np.ndarray:
        if abs(self.determinant) < 1e-12:
            raise GeometryError("affine transform is not invertible")
        return cv2.invertAffineTransform(self.matrix)

    def apply(self, points_px: np.ndarray) -> np.ndarray:
        pts = np.asarray(points_px, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]


@dataclass(frozen=True)
class MaskSpec:
    shape_id: str = "full_face_rounded"
    scale: float = 1.0
    anchor: tuple = (0.5, 0.725)

    def __post_init__(self):
        if not (0.0 < self.scale <= 1.0):
            raise ConfigError(f"mask scale must lie in (0, 1], got {self.scale}")
        if self.shape_id not in ("full_face_rounded", "rectangle"):
            raise ConfigError(f"unknown mask shape {self.shape_id!r}")


@dataclass
class MelWindow:
    values: np.ndarray  # (80, steps) log-mel
    frame_index: int  # first video frame covered
    n_frames: int

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> int:
        return self.values.shape[1]


class SyncScorer(Protocol):
    """Anything that embeds visual and audio windows into a shared space.

    Similarity of a pair is the clamped cosine of the two embeddings.
    """

    frames: int

    def embed_visual(self, windows: np.ndarray) -> np.ndarray: ...

    def embed_audio(self, mels: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------- ingestion


def resample_frame_indices(n_src: int, src_fps: float, dst_fps: float = FPS) -> np.ndarray:
    """Nearest-frame resampling; identity when the rates match."""
    if src_fps == dst_fps:
        return np.arange(n_src)
    n_dst = int(np.floor(n_src * dst_fps / src_fps + 1e-9))
    idx = np.floor(np.arange(n_dst) * src_fps / dst_fps + 0.5).astype(int)
    return np.clip(idx, 0, n_src - 1)


def resample_audio(audio: np.ndarray, src_rate: int, dst_rate: int = SAMPLE_RATE) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float32)
    if src_rate == dst_rate:
        return audio
    g = gcd(int(src_rate), int(dst_rate))
    return resample_poly(audio, dst_rate // g, src_rate // g).astype(np.float32)


def fit_audio_length(audio: np.ndarray, n_frames: int) -> np.ndarray:
    n = round(n_frames / FPS * SAMPLE_RATE)
    if len(audio) >= n:
        return audio[:n]
    return np.pad(audio, (0, n - len(audio)))


def read_wav(path) -> tuple[np.ndarray, int]:
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float32) / np.iinfo(data.dtype).max
    return data.astype(np.float32), int(rate)


def write_wav(path, audio: np.ndarray, rate: int = SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(audio) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), rate, pcm)


def save_clip(clip: AVClip, directory) -> Path:
    """Write a clip as frames.npy + audio.wav (PCM16) + landmarks.csv + clip.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "frames.npy", clip.frames)
    write_wav(d / "audio.wav", clip.audio, clip.sample_rate)
    if clip.landmarks is not None:
        with open(d / "landmarks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "point", "x", "y"])
            for f, pts in enumerate(clip.landmarks):
                for k, (x, y) in enumerate(pts):
                    w.writerow([f, k, repr(float(x)), repr(float(y))])
    meta = {k: (v.item() if isinstance(v, np.generic) else v) for k, v in clip.meta.items()}
    arrays = {k: v for k, v in meta.items() if isinstance(v, np.ndarray)}
    meta = {k: v for k, v in meta.items() if k not in arrays and _jsonable(v)}
    if arrays:
        np.savez(d / "meta.npz", **arrays)
    with open(d / "clip.json", "w") as fh:
        json.dump({"fps": clip.fps, "sample_rate": clip.sample_rate, "meta": meta}, fh, indent=2)
    return d


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def _read_landmarks_csv(path, n_frames: int) -> np.ndarray:
    rows = list(csv.DictReader(open(path)))
    n_points = 1 + max(int(r["point"]) for r in rows)
    out = np.full((n_frames, n_points, 2), np.nan)
    for r in rows:
        out[int(r["frame"]), int(r["point"])] = (float(r["x"]), float(r["y"]))
    return out


def _load_raw(path: Path, audio_path=None):
    if path.is_dir():
        info_path = path / "clip.json"
        if not info_path.exists() or not (path / "frames.npy").exists():
            raise IngestError(f"{path} is not a clip directory")
        info = json.loads(info_path.read_text())
        frames = np.load(path / "frames.npy")
        audio, rate = read_wav(audio_path or path / "audio.wav")
        lm_path = path / "landmarks.csv"
        landmarks = _read_landmarks_csv(lm_path, len(frames)) if lm_path.exists() else None
        meta = dict(info.get("meta", {}))
        if (path / "meta.npz").exists():
            with np.load(path / "meta.npz") as arrays:
                meta.update({k: arrays[k] for k in arrays.files})
        return frames, float(info["fps"]), audio, rate, landmarks, meta
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise IngestError(f"cannot decode {path}")
    fps = cap.get(cv2.CAP_PROP_FPS)
    frames = []
    while True:
        ok, bgr = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise IngestError(f"no frames decoded from {path}")
    wav = Path(audio_path) if audio_path else path.with_suffix(".wav")
    if not wav.exists():
        raise IngestError(f"no audio track found for {path}")
    audio, rate = read_wav(wav)
    return np.stack(frames), float(fps), audio, rate, None, {"id": path.stem}


def ingest(
    path,
    target_fps: int = FPS,
    target_rate: int = SAMPLE_RATE,
    detector: Optional[Callable[[np.ndarray], Optional[np.ndarray]]] = None,
    audio_path=None,
) -> AVClip:
    """Load a clip directory or video file and bring it to 25 fps / 16 kHz.

    Landmarks come from ``landmarks.csv`` when present, otherwise from
    ``detector(frame)`` which returns normalized (K, 2) points or None.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path} does not exist")
    try:
        frames, fps, audio, rate, landmarks, meta = _load_raw(path, audio_path)
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot decode {path}: {exc}") from exc
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise IngestError(f"unexpected frame array shape {frames.shape}")
    idx = resample_frame_indices(len(frames), fps, target_fps)
    frames = np.ascontiguousarray(frames[idx]).astype(np.uint8, copy=False)
    if landmarks is not None:
        landmarks = landmarks[idx]
    elif detector is not None:
        landmarks = np.full((len(frames), N_LANDMARKS, 2), np.nan)
        for i, fr in enumerate(frames):
            pts = detector(fr)
            if pts is not None:
                landmarks[i, : len(pts)] = pts
    audio = fit_audio_length(resample_audio(audio, rate, target_rate), len(frames))
    meta.setdefault("id", path.stem)
    meta.setdefault("quality_flag", "ok")
    if landmarks is not None:
        missing = np.isnan(landmarks[:, ALIGN_POINTS]).any(axis=(1, 2)).mean()
        if missing > MAX_MISSING_FACE_FRACTION:
            raise QualityError(f"no face in {missing:.0%} of frames of {path}")
    clip = AVClip(frames, float(target_fps), audio, int(target_rate), landmarks, meta)
    return clip.validate()


# ----------------------------------------------------------------- geometry


def _to_px(points_norm: np.ndarray, width: int, height: int) -> np.ndarray:
    return np.asarray(points_norm, dtype=np.float64) * [width, height] - 0.5


def _to_norm(points_px: np.ndarray, width: int, height: int) -> np.ndarray:
    return (np.asarray(points_px, dtype=np.float64) + 0.5) / [width, height]


def estimate_alignment(landmarks: np.ndarray, frame_shape, out_size: int = DEFAULT_CROP, template=CANONICAL_TEMPLATE) -> AffineTransform:
    pts = np.asarray(landmarks, dtype=np.float64)[: len(template)]
    if len(pts) < 3 or np.isnan(pts).any():
        raise GeometryError("need at least 3 valid landmarks")
    h, w = frame_shape[:2]
    src = _to_px(pts, w, h)
    dst = _to_px(template[: len(pts)], out_size, out_size)
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0 or sv[1] / sv[0] < 1e-3:
        raise GeometryError("landmarks are collinear")
    tform = estimate_transform("similarity", src, dst)
    return AffineTransform(tform.params[:2], out_size)


def frontalize(frame: np.ndarray, landmarks: np.ndarray, out_size: int = DEFAULT_CROP):
    """Similarity-align a face so the 5-point template lands on canonical spots."""
    transform = estimate_alignment(landmarks, frame.shape, out_size)
    crop = cv2.warpAffine(
        frame, transform.matrix, (out_size, out_size), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )
    return crop, transform


def transform_landmarks(landmarks: np.ndarray, transform: AffineTransform, frame_shape) -> np.ndarray:
    h, w = frame_shape[:2]
    px = transform.apply(_to_px(landmarks, w, h))
    return _to_norm(px, transform.out_size, transform.out_size)


def _feather_ramp(size: int, feather: int) -> np.ndarray:
    if feather <= 0:
        return np.ones((size, size), np.float32)
    d = np.arange(size, dtype=np.float32)
    edge = np.minimum(d + 1, size - d) / float(feather + 1)
    ramp = np.clip(edge, 0.0, 1.0)
    return np.minimum.outer(ramp, ramp)


def paste_back(
    face_crop: np.ndarray,
    transform: AffineTransform,
    original_frame: np.ndarray,
    feather: Optional[int] = None,
    alpha: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Warp a crop back into the frame; pixels outside its footprint are untouched.

    ``alpha`` (S, S) in [0, 1] restricts the paste to part of the crop, e.g. the
    inpainting mask; by default the whole crop is pasted with feathered edges.
    """
    inv = transform.inverse()  # raises on singular transforms
    del inv
    h, w = original_frame.shape[:2]
    size = face_crop.shape[0]
    if feather is None:
        feather = max(1, size // 32)
    alpha_crop = _feather_ramp(size, feather) if alpha is None else np.asarray(alpha, np.float32)
    flags = cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP
    alpha = cv2.warpAffine(alpha_crop, transform.matrix, (w, h), flags=flags, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    warped = cv2.warpAffine(face_crop, transform.matrix, (w, h), flags=flags, borderMode=cv2.BORDER_REPLICATE)
    alpha = alpha[..., None]
    blended = alpha * warped.astype(np.float32) + (1.0 - alpha) * original_frame.astype(np.float32)
    out = np.clip(np.round(blended), 0, 255).astype(original_frame.dtype)
    untouched = alpha[..., 0] <= 0
    out[untouched] = original_frame[untouched]
    return out


# --------------------------------------------------------------------- mask


_FULL_FACE_TRAPEZOID = np.array([[0.14, 0.47], [0.86, 0.47], [0.74, 0.98], [0.26, 0.98]])
_FULL_FACE_ROUNDING = 0.07


def _convex_sdf(px: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Signed distance from points (..., 2) to a convex polygon (positive outside)."""
    n = len(poly)
    area = 0.5 * sum(poly[i, 0] * poly[(i + 1) % n, 1] - poly[(i + 1) % n, 0] * poly[i, 1] for i in range(n))
    orient = 1.0 if area > 0 else -1.0
    line_d = []
    seg_d = []
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        e = b - a
        length = np.hypot(*e)
        normal = orient * np.array([e[1], -e[0]]) / length
        line_d.append((px - a) @ normal)
        t = np.clip(((px - a) @ e) / (length**2), 0.0, 1.0)
        closest = a + t[..., None] * e
        seg_d.append(np.linalg.norm(px - closest, axis=-1))
    line_d = np.max(np.stack(line_d), axis=0)
    seg_d = np.min(np.stack(seg_d), axis=0)
    return np.where(line_d <= 0, line_d, seg_d)


def _inset_polygon(poly: np.ndarray, r: float) -> np.ndarray:
    n = len(poly)
    area = 0.5 * sum(poly[i, 0] * poly[(i + 1) % n, 1] - poly[(i + 1) % n, 0] * poly[i, 1] for i in range(n))
    orient = 1.0 if area > 0 else -1.0
    lines = []
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        e = b - a
        normal = orient * np.array([e[1], -e[0]]) / np.hypot(*e)
        lines.append((a - r * normal, e))
    out = []
    for i in range(n):
        (p1, d1), (p2, d2) = lines[i - 1], lines[i]
        s = np.linalg.solve(np.stack([d1, -d2], axis=1), p2 - p1)
        out.append(p1 + s[0] * d1)
    return np.array(out)


@lru_cache(maxsize=64)
def _mask_array(shape_id: str, scale: float, anchor: tuple, size: int, supersample: int = 4) -> np.ndarray:
    anchor_arr = np.asarray(anchor, dtype=np.float64)
    poly = anchor_arr + scale * (_FULL_FACE_TRAPEZOID - anchor_arr)
    offs = (np.arange(supersample) + 0.5) / supersample
    coords = (np.arange(size)[:, None] + offs[None, :]).reshape(-1) / size
    xx, yy = np.meshgrid(coords, coords)
    pts = np.stack([xx, yy], axis=-1)
    if shape_id == "rectangle":
        lo, hi = poly.min(axis=0), poly.max(axis=0)
        inside = np.all((pts >= lo) & (pts <= hi), axis=-1)
    else:
        r = _FULL_FACE_ROUNDING * scale
        inside = _convex_sdf(pts, _inset_polygon(poly, r)) - r <= 0
    cov = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    cov = cov.astype(np.float32)
    cov.setflags(write=False)
    return cov


def mask_channel(spec: MaskSpec, size: int) -> np.ndarray:
    """The fixed mask for a square crop: 1 inside, 0 outside, area-weighted edges."""
    return _mask_array(spec.shape_id, float(spec.scale), tuple(spec.anchor), int(size))


def apply_fixed_mask(face_crop: np.ndarray, mask_spec: MaskSpec):
    if face_crop.ndim != 3 or face_crop.shape[0] != face_crop.shape[1]:
        raise ShapeError(f"face crop must be square (S, S, C), got {face_crop.shape}")
    m = mask_channel(mask_spec, face_crop.shape[0])
    keep = (1.0 - m)[..., None]
    if face_crop.dtype == np.uint8:
        masked = np.round(face_crop.astype(np.float32) * keep).astype(np.uint8)
    else:
        masked = face_crop * keep.astype(face_crop.dtype)
    return masked, m.copy()


# ---------------------------------------------------------------------- mel


def log_mel(audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """80-bin log-mel over a whole clip, exactly 4 steps per 25-fps frame."""
    if sample_rate != SAMPLE_RATE:
        raise ConfigError(f"mel features expect {SAMPLE_RATE} Hz audio")
    audio = np.asarray(audio, dtype=np.float32)
    n_steps = len(audio) // HOP_LENGTH
    mel = librosa.feature.melspectrogram(
        y=audio,
        sr=SAMPLE_RATE,
        n_fft=WIN_LENGTH,
        hop_length=HOP_LENGTH,
        win_length=WIN_LENGTH,
        n_mels=N_MELS,
        center=True,
        power=2.0,
    )[:, :n_steps]
    return np.log(np.maximum(mel, 1e-5)).astype(np.float32)


def compute_mel(audio: np.ndarray, frame_range, sample_rate: int = SAMPLE_RATE, full: Optional[np.ndarray] = None) -> MelWindow:
    start, stop = int(frame_range[0]), int(frame_range[1])
    n_frames = len(audio) // SAMPLES_PER_FRAME
    if start < 0 or stop > n_frames or stop <= start:
        raise BoundsError(f"frame range [{start}, {stop}) outside clip of {n_frames} frames")
    mel = log_mel(audio, sample_rate) if full is None else full
    values = mel[:, start * MEL_STEPS_PER_FRAME : stop * MEL_STEPS_PER_FRAME]
    return MelWindow(values, start, stop - start)


def mel_bin_frequencies(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return librosa.mel_frequencies(n_mels=n_mels + 2, fmin=0.0, fmax=sample_rate / 2)[1:-1]


# ------------------------------------------------------------ sync offsets


def roll_audio(clip: AVClip, k: int) -> AVClip:
    """Circularly delay the audio by ``k`` frames (k*640 samples)."""
    audio = np.roll(clip.audio, int(k) * SAMPLES_PER_FRAME)
    meta = dict(clip.meta)
    meta["av_offset"] = int(meta.get("av_offset", 0)) + int(k)
    return clip.replace(audio=audio, meta=meta)


def _log_odds(q: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    q = np.clip(q, eps, 1 - eps)
    return np.log(q) - np.log1p(-q)


def pair_similarity(v: np.ndarray, a: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    """Clamped cosine between rows of ``v`` and rows of ``a`` (all pairs)."""
    vn = v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    an = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    return np.clip(vn @ an.T, eps, 1 - eps)


def offset_profile(frames: np.ndarray, mel: np.ndarray, scorer: SyncScorer, search_range: int, stride: Optional[int] = None):
    """Log-odds sync score for every visual window and every audio shift.

    Returns an array (n_windows, 2R+1); column ``R + s`` pairs the visual
    window starting at ``f`` with audio starting at ``f + s``.
    """
    n = len(frames)
    win = scorer.frames
    if n < win + 2 * search_range:
        raise BoundsError(f"clip of {n} frames is shorter than window {win} + 2*{search_range}")
    stride = stride or win
    starts = np.arange(search_range, n - win - search_range + 1, stride)
    visual = np.stack([frames[f : f + win] for f in starts])
    a_starts = np.arange(0, n - win + 1)
    steps = MEL_STEPS_PER_FRAME
    mels = np.stack([mel[:, s * steps : (s + win) * steps] for s in a_starts])
    v = scorer.embed_visual(visual)
    a = scorer.embed_audio(mels)
    q = pair_similarity(v, a)
    shifts = np.arange(-search_range, search_range + 1)
    cols = starts[:, None] + shifts[None, :]
    return _log_odds(q[np.arange(len(starts))[:, None], cols])


def scan_av_offset(clip: AVClip, scorer: SyncScorer, search_range: int = DEFAULT_SEARCH_RANGE, stride: Optional[int] = None, mel: Optional[np.ndarray] = None):
    """Find the corrective audio shift (in frames) and a sync confidence.

    A clip whose audio lags by ``k`` frames yields ``offset == -k``, so
    ``roll_audio(clip, offset)`` realigns it. Confidence is max minus median
    of the window-averaged log-odds profile.
    """
    if mel is None:
        mel = log_mel(clip.audio, clip.sample_rate)
    prof = offset_profile(clip.frames, mel, scorer, search_range, stride).mean(axis=0)
    best = int(np.argmax(prof))
    offset = -(best - search_range)
    confidence = float(prof[best] - np.median(prof))
    return offset, confidence


def filter_by_confidence(clips: Iterable[AVClip], threshold: float = DEFAULT_CONF_THRESHOLD) -> list:
    clips = list(clips)
    for c in clips:
        if "sync_conf" not in c.meta:
            raise ValueError(f"clip {c.id} has not been scored")
    kept = [c for c in clips if c.meta["sync_conf"] >= threshold]
    if clips and not kept:
        warnings.warn(f"all {len(clips)} clips fell below sync confidence {threshold}", stacklevel=2)
    return kept


# -------------------------------------------------------------- pipelines


def frontalize_clip(clip: AVClip, out_size: int = DEFAULT_CROP) -> AVClip:
    """Frontalize every frame; the crop clip keeps per-frame transforms in meta."""
    if clip.landmarks is None:
        raise GeometryError(f"clip {clip.id} has no landmarks")
    crops, mats, lms = [], [], []
    last = None
    for frame, lm in zip(clip.frames, clip.landmarks):
        try:
            crop, tf = frontalize(frame, lm, out_size)
            last = tf
        except GeometryError:
            if last is None:
                raise
            tf = last  # frames without a face reuse the previous alignment
            crop = cv2.warpAffine(frame, tf.matrix, (out_size, out_size), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        crops.append(crop)
        mats.append(tf.matrix)
        lms.append(transform_landmarks(lm, tf, frame.shape))
    meta = dict(clip.meta)
    meta["transforms"] = np.stack(mats)
    meta["source_size"] = list(clip.frames.shape[1:3])
    return clip.replace(frames=np.stack(crops), landmarks=np.stack(lms), meta=meta)


def center_crop_clip(clip: AVClip, out_size: int) -> AVClip:
    """Plain resize of the full frame, no alignment."""
    frames = np.stack([cv2.resize(f, (out_size, out_size), interpolation=cv2.INTER_AREA) for f in clip.frames])
    return clip.replace(frames=frames)


def manifest_record(clip: AVClip, path: str = "") -> dict:
    return {
        "id": clip.id,
        "path": str(path),
        "fps": clip.fps,
        "sample_rate": clip.sample_rate,
        "offset": int(clip.meta.get("applied_offset", 0)),
        "sync_conf": None if clip.meta.get("sync_conf") is None else float(clip.meta["sync_conf"]),
        "quality_flag": clip.meta.get("quality_flag", "ok"),
    }


def write_manifest(records: Sequence[dict], path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_corpus(clips: Sequence[AVClip], directory) -> Path:
    """One clip directory per clip plus ``manifest.jsonl``; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for c in clips:
        save_clip(c, d / c.id)
        records.append(manifest_record(c, c.id))
    return write_manifest(records, d / "manifest.jsonl")


def load_corpus(directory, **ingest_kw) -> list:
    """Load the clips listed in ``manifest.jsonl`` (or every clip subdirectory)."""
    d = Path(directory)
    if not d.is_dir():
        raise IngestError(f"{d} is not a corpus directory")
    manifest = d / "manifest.jsonl"
    if manifest.exists():
        paths = [d / r["path"] if r.get("path") else d / r["id"] for r in read_manifest(manifest)]
    else:
        paths = sorted(p for p in d.iterdir() if (p / "clip.json").exists())
    if not paths:
        raise IngestError(f"no clips found in {d}")
    return [ingest(p, **ingest_kw) for p in paths]


def preprocess_corpus(
    clips: Sequence[AVClip],
    scorer: Optional[SyncScorer] = None,
    out_size: int = DEFAULT_CROP,
    adjust_offset: bool = True,
    order: str = "frontalize_first",
    threshold: Optional[float] = DEFAULT_CONF_THRESHOLD,
    search_range: int = DEFAULT_SEARCH_RANGE,
) -> list:
    """Frontalize, offset-correct and filter a set of ingested clips.

    ``order='scan_first'`` scores offsets on unaligned full frames before
    frontalizing; the default scans the aligned crops.
    """
    if order not in ("frontalize_first", "scan_first"):
        raise ConfigError(f"unknown preprocessing order {order!r}")
    out = []
    for clip in clips:
        crop_clip = frontalize_clip(clip, out_size)
        if scorer is not None and adjust_offset:
            scan_src = crop_clip if order == "frontalize_first" else center_crop_clip(clip, out_size)
            offset, conf = scan_av_offset(scan_src, scorer, search_range)
            crop_clip = roll_audio(crop_clip, offset)
            crop_clip.meta["applied_offset"] = offset
            _, conf = scan_av_offset(crop_clip, scorer, search_range)
            crop_clip.meta["sync_conf"] = conf
        out.append(crop_clip)
    if scorer is not None and adjust_offset and threshold is not None:
        out = filter_by_confidence(out, threshold)
    return out
