"""Procedural talking-face clips whose mouth opening is driven by the audio
envelope, plus an analytic sync scorer for the synthetic domain.

Every clip is a cartoon face (ellipse head, eyes, nose, cheeks, lips)
rendered from a canonical face layout through a per-frame similarity pose.
The audio is a harmonic carrier whose amplitude envelope is constant within
each video frame; all carrier frequencies are multiples of 25 Hz so each
640-sample frame holds whole periods and the per-frame RMS is exact.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence

import numpy as np

from . import preprocess as pp
from .preprocess import AVClip

MOUTH_HALF_WIDTH = 0.15
MOUTH_MIN, MOUTH_MAX = 0.02, 0.22
CARRIER_AMPLITUDE = 0.5
# mouth-region box used to read the opening back off a crop; it is aligned
# to 8-pixel patches at 64 px so patch-mean projections preserve it
MOUTH_BOX = (0.375, 0.625, 0.625, 0.875)  # x0, x1, y0, y1

_CHEEKS = ((0.24, 0.70), (0.76, 0.70))
_CHEEK_RADIUS = 0.06


@dataclass(frozen=True)
class SynthSpec:
    n_clips: int = 8
    frames_per_clip: int = 100
    frame_size: int = 256
    face_style: str = "cartoon"
    audio_model: str = "envelope_tone"
    noise_level: float = 0.0
    seed: int = 0
    rotation_deg: float = 0.0
    translation: float = 0.0
    yaw: float = 0.0
    face_scale: float = 0.8
    cheek_coupling: float = 1.0
    articulation: float = 0.0  # std of visible motion the audio does not carry
    pitch: str = "varying"  # varying | per_clip

    def __post_init__(self):
        if self.audio_model not in ("envelope_tone", "formant_sweep"):
            raise ValueError(f"unknown audio model {self.audio_model!r}")
        if self.pitch not in ("varying", "per_clip"):
            raise ValueError(f"unknown pitch mode {self.pitch!r}")
        if self.face_style != "cartoon":
            raise ValueError(f"unknown face style {self.face_style!r}")
        if self.noise_level < 0 or self.articulation < 0:
            raise ValueError("noise_level and articulation must be >= 0")
        if self.n_clips < 1 or self.frames_per_clip < 1:
            raise ValueError("need at least one clip of one frame")

    def to_dict(self) -> dict:
        return asdict(self)


def mouth_height(envelope):
    """Mouth opening (fraction of crop height) as a monotone map of the envelope."""
    return MOUTH_MIN + (MOUTH_MAX - MOUTH_MIN) * np.asarray(envelope)


def envelope_from_height(height):
    return (np.asarray(height) - MOUTH_MIN) / (MOUTH_MAX - MOUTH_MIN)


def random_envelope(n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Syllable-like per-frame envelope in [0, 1]."""
    env = np.zeros(n_frames)
    f = 0
    while f < n_frames:
        if rng.random() < 0.3:
            length = int(rng.integers(1, 3))
            env[f : f + length] = 0.0
        else:
            length = int(rng.integers(2, 7))
            amp = rng.uniform(0.35, 1.0)
            shape = np.sin(np.pi * (np.arange(length) + 0.5) / length)
            env[f : f + length] = (amp * shape)[: n_frames - f]
        f += length
    return env


def pitch_track(n_frames: int, rng: np.random.Generator, mode: str) -> np.ndarray:
    """Per-frame fundamental in Hz, always a multiple of 25 Hz. ``per_clip``
    holds one pitch for the whole clip; ``varying`` redraws it in runs of 2-6
    frames so the audio carries no clip-level signature."""
    if mode == "per_clip":
        return np.full(n_frames, 25.0 * rng.integers(5, 10))
    out = np.empty(n_frames)
    f = 0
    while f < n_frames:
        length = int(rng.integers(2, 7))
        out[f : f + length] = 25.0 * rng.integers(5, 10)  # 125..225 Hz
        f += length
    return out


def _carrier(n_samples: int, rng: np.random.Generator, audio_model: str, envelope_per_sample: np.ndarray, f0_per_sample: np.ndarray):
    # every frequency is a multiple of 25 Hz, so phase is continuous across frames
    phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(f0_per_sample[:-1])]) / pp.SAMPLE_RATE
    if audio_model == "envelope_tone":
        weights = np.array([1.0, 0.6, 0.4, 0.25])
        offsets = rng.uniform(0, 2 * np.pi, len(weights))
        return sum(w * np.sin((h + 1) * phase + p) for h, (w, p) in enumerate(zip(weights, offsets)))
    t = np.arange(n_samples) / pp.SAMPLE_RATE
    formant = 25.0 * np.round((400.0 + 1200.0 * envelope_per_sample) / 25.0)
    return np.sin(phase) + 0.6 * np.sin(2 * np.pi * formant * t)


def _ellipse_alpha(qx, qy, cx, cy, rx, ry, px_per_unit):
    dx, dy = qx - cx, qy - cy
    f = (dx / rx) ** 2 + (dy / ry) ** 2 - 1.0
    grad = 2.0 * np.sqrt((dx / rx**2) ** 2 + (dy / ry**2) ** 2) + 1e-9
    sd = f / grad * px_per_unit
    return np.clip(0.5 - sd, 0.0, 1.0)


def canonical_landmarks(height: float) -> np.ndarray:
    cx, cy = pp.MOUTH_CENTER
    pts = np.zeros((pp.N_LANDMARKS, 2))
    pts[: len(pp.CANONICAL_TEMPLATE)] = pp.CANONICAL_TEMPLATE
    pts[pp.UPPER_LIP] = (cx, cy - height / 2)
    pts[pp.LOWER_LIP] = (cx, cy + height / 2)
    return pts


def _pose_matrix(theta, scale, tx, ty, squash):
    """Canonical normalized coords -> frame normalized coords."""
    c, s = np.cos(theta), np.sin(theta)
    lin = scale * np.array([[c, -s], [s, c]]) @ np.diag([squash, 1.0])
    off = np.array([0.5 + tx, 0.5 + ty]) - lin @ np.array([0.5, 0.5])
    return lin, off


def render_face(identity: dict, height: float, cheek: float, pose, size: int) -> np.ndarray:
    """Rasterize one face frame. ``pose`` = (theta, scale, tx, ty, squash)."""
    lin, off = _pose_matrix(*pose)
    inv = np.linalg.inv(lin)
    coords = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)
    p = np.stack([xx - off[0], yy - off[1]], axis=-1) @ inv.T
    qx, qy = p[..., 0], p[..., 1]
    ppu = size * pose[1] * min(pose[4], 1.0)

    img = np.empty((size, size, 3))
    img[:] = identity["background"]

    def paint(alpha, color):
        img[:] = img * (1 - alpha[..., None]) + alpha[..., None] * np.asarray(color, dtype=np.float64)

    skin = np.asarray(identity["skin"], dtype=np.float64)
    paint(_ellipse_alpha(qx, qy, 0.5, 0.53, identity["head_rx"], identity["head_ry"], ppu), skin)
    blush = skin + cheek * (np.array([215.0, 80.0, 90.0]) - skin)
    for cx, cy in _CHEEKS:
        paint(_ellipse_alpha(qx, qy, cx, cy, _CHEEK_RADIUS, _CHEEK_RADIUS, ppu), blush)
    for cx, cy in pp.CANONICAL_TEMPLATE[:2]:
        paint(_ellipse_alpha(qx, qy, cx, cy, 0.05, 0.035, ppu), (245, 245, 245))
        paint(_ellipse_alpha(qx, qy, cx, cy, 0.022, 0.022, ppu), identity["iris"])
    paint(_ellipse_alpha(qx, qy, 0.5, 0.56, 0.03, 0.022, ppu), skin * 0.7)
    mx, my = pp.MOUTH_CENTER
    paint(_ellipse_alpha(qx, qy, mx, my, MOUTH_HALF_WIDTH + 0.02, height / 2 + 0.018, ppu), identity["lips"])
    paint(_ellipse_alpha(qx, qy, mx, my, MOUTH_HALF_WIDTH, height / 2, ppu), (45, 12, 20))
    return img


def _identity(rng: np.random.Generator) -> dict:
    return {
        "skin": rng.uniform([170, 120, 90], [240, 200, 170]),
        "background": rng.uniform(20, 120, 3),
        "iris": rng.uniform(20, 110, 3),
        "lips": rng.uniform([150, 50, 60], [200, 100, 110]),
        "head_rx": rng.uniform(0.36, 0.40),
        "head_ry": rng.uniform(0.44, 0.47),
    }


def generate_clip(spec: SynthSpec, index: int, rng: np.random.Generator) -> AVClip:
    n = spec.frames_per_clip
    env = random_envelope(n, rng)
    visible = env
    if spec.articulation > 0:
        # smooth per-frame articulation shared by lips and cheeks but absent from the audio
        jitter = np.convolve(rng.normal(size=n + 2), [0.25, 0.5, 0.25], mode="valid") / np.sqrt(0.375)
        visible = np.clip(env + spec.articulation * jitter, 0.0, 1.0)
    heights = mouth_height(visible)
    cheek = np.clip(spec.cheek_coupling * visible, 0.0, 1.0) * 0.8

    spf = pp.SAMPLES_PER_FRAME
    env_samples = np.repeat(env, spf)
    f0 = pitch_track(n, rng, spec.pitch)
    carrier = _carrier(n * spf, rng, spec.audio_model, env_samples, np.repeat(f0, spf))
    carrier_rms = float(np.sqrt(np.mean(carrier[:spf] ** 2)))
    audio = CARRIER_AMPLITUDE * env_samples * carrier / (carrier_rms * np.sqrt(2.0))
    if spec.noise_level > 0:
        audio = audio + rng.normal(0.0, 0.05 * spec.noise_level, audio.shape)
    audio = np.clip(audio, -1.0, 1.0).astype(np.float32)

    phase = rng.uniform(0, 2 * np.pi, 3)
    f = np.arange(n)
    theta = np.deg2rad(spec.rotation_deg) * np.sin(2 * np.pi * f / 50.0 + phase[0])
    tx = spec.translation * np.sin(2 * np.pi * f / 70.0 + phase[1])
    ty = spec.translation * np.cos(2 * np.pi * f / 90.0 + phase[2])
    squash = np.full(n, np.cos(np.deg2rad(spec.yaw)))
    scale = np.full(n, spec.face_scale)

    identity = _identity(rng)
    frames = np.empty((n, spec.frame_size, spec.frame_size, 3), np.uint8)
    landmarks = np.empty((n, pp.N_LANDMARKS, 2))
    for i in range(n):
        pose = (theta[i], scale[i], tx[i], ty[i], squash[i])
        img = render_face(identity, heights[i], cheek[i], pose, spec.frame_size)
        if spec.noise_level > 0:
            img = img + rng.normal(0.0, 12.0 * spec.noise_level, img.shape)
        frames[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
        lin, off = _pose_matrix(*pose)
        landmarks[i] = canonical_landmarks(heights[i]) @ lin.T + off

    meta = {
        "id": f"synth_{spec.seed}_{index:04d}",
        "quality_flag": "ok",
        "av_offset": 0,
        "f0": f0,
        "envelope": env,
        "articulation": visible,
        "mouth_height": heights,
        "carrier_rms": CARRIER_AMPLITUDE / np.sqrt(2.0),
        "pose": np.stack([theta, scale, tx, ty, squash], axis=1),
    }
    return AVClip(frames, float(pp.FPS), audio, pp.SAMPLE_RATE, landmarks, meta)


def generate_corpus(spec: SynthSpec) -> list:
    """Deterministic in ``spec`` (seed included)."""
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_clips)
    return [generate_clip(spec, i, np.random.default_rng(s)) for i, s in enumerate(seeds)]


def shift_audio(clip: AVClip, k: int) -> AVClip:
    if abs(k) >= clip.n_frames:
        raise ValueError(f"shift {k} is not shorter than the clip ({clip.n_frames} frames)")
    return pp.roll_audio(clip, k)


def misalign_corpus(clips: Sequence[AVClip], min_shift: int, max_shift: int, seed: int = 0) -> List[AVClip]:
    """Shift each clip's audio by a random k with min_shift <= |k| <= max_shift and random sign."""
    if not 0 < min_shift <= max_shift:
        raise ValueError("need 0 < min_shift <= max_shift")
    rng = np.random.default_rng(seed)
    out = []
    for c in clips:
        k = int(rng.integers(min_shift, max_shift + 1)) * (1 if rng.random() < 0.5 else -1)
        out.append(shift_audio(c, k))
    return out


def frame_rms_envelope(audio: np.ndarray, carrier_rms: float = CARRIER_AMPLITUDE / np.sqrt(2.0)) -> np.ndarray:
    """Invert the synthesis: per-frame envelope from audio RMS."""
    spf = pp.SAMPLES_PER_FRAME
    n = len(audio) // spf
    frames = np.asarray(audio[: n * spf], dtype=np.float64).reshape(n, spf)
    return np.sqrt(np.mean(frames**2, axis=1)) / carrier_rms


# ------------------------------------------------------ analytic scoring


def mouth_darkness(crops: np.ndarray) -> np.ndarray:
    """Mean darkness (255 - luma) inside the mouth box of each crop (..., S, S, 3)."""
    crops = np.asarray(crops, dtype=np.float64)
    s = crops.shape[-2]
    x0, x1, y0, y1 = (int(round(v * s)) for v in MOUTH_BOX)
    luma = crops[..., y0:y1, x0:x1, :] @ np.array([0.299, 0.587, 0.114])
    return 255.0 - luma.mean(axis=(-2, -1))


def mel_energy(mels: np.ndarray) -> np.ndarray:
    """Per-video-frame log energy from (..., 80, 4F) log-mel."""
    mels = np.asarray(mels, dtype=np.float64)
    per_step = np.log(np.exp(mels).sum(axis=-2))
    shape = per_step.shape[:-1] + (-1, pp.MEL_STEPS_PER_FRAME)
    return per_step.reshape(shape).mean(axis=-1)


def _signed_split(x: np.ndarray) -> np.ndarray:
    z = x - x.mean(axis=-1, keepdims=True)
    sd = z.std(axis=-1, keepdims=True)
    z = np.where(sd > 1e-9, z / np.maximum(sd, 1e-9), 0.0)
    return np.concatenate([np.maximum(z, 0), np.maximum(-z, 0)], axis=-1)


class EnvelopeOracleScorer:
    """Sync scorer with no learned weights: compares the standardized
    mouth-darkness trace with the standardized audio-energy trace.

    Embeddings are the positive and negative parts of the z-scores, so they
    are nonnegative, cosine lies in [0, 1], and the score is invariant to
    audio gain.
    """

    def __init__(self, frames: int = 5):
        self.frames = frames

    def embed_visual(self, windows: np.ndarray) -> np.ndarray:
        return _signed_split(mouth_darkness(windows))

    def embed_audio(self, mels: np.ndarray) -> np.ndarray:
        return _signed_split(mel_energy(mels))


def correlation_oracle_accuracy(heights_a, envelopes_b, labels, tol: float = 1e-6) -> float:
    """Brute-force classifier: positive iff the mouth-height window is exactly
    the synthesis map applied to the envelope window. This is the correlation
    test with a known affine map, so constant (silent) windows are decided too."""
    heights_a = np.asarray(heights_a, dtype=np.float64)
    envelopes_b = np.asarray(envelopes_b, dtype=np.float64)
    pred = np.max(np.abs(heights_a - mouth_height(envelopes_b)), axis=1) < tol
    return float(np.mean(pred == np.asarray(labels, dtype=bool)))
