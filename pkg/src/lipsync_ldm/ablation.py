"""Desk-scale experiment harness.

Three studies: one-axis sweeps of sync-network training, the mask-scale
shortcut experiment for the generator, and the comparison of pixel-space
against latent-space sync supervision. Every study writes its configs,
curves and a summary table so the numbers can be regenerated.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from . import evalsuite as ev
from . import preprocess as pp
from . import trainer as tr
from .errors import ConfigError
from .latent_diffusion import PatchProjectionAutoencoder, generate_crops
from .losses import LossWeights, TemporalVideoEncoder, trepa_loss
from .stablesyncnet import Curves, SyncCorpus, SyncNetConfig, evaluate_accuracy, make_val_set, train_syncnet, trailing_mean
from .stablesyncnet.data import frames_to_tensor
from .synthdata import EnvelopeOracleScorer, mouth_darkness

log = logging.getLogger(__name__)

SYNCNET_AXES = ("batch_size", "embed_dim", "frames", "arch", "input_space", "preprocessing_order")
AXES = SYNCNET_AXES + ("mask_scale",)
PREPROCESSING = ("adjust", "scan_first", "no_adjust")
OK, FAILED = "OK", "FAILED"
# held-out pairs used for every accuracy number
ACCURACY_PAIRS = 512
ACCURACY_SEED = 5


@dataclass
class SweepGrid:
    """One varied axis over a fixed base config. Cell ``i`` runs with seed
    ``seed + i``."""

    axis: str
    values: list
    base_config: Union[SyncNetConfig, dict, None] = None
    seed: int = 0
    preprocessing_order: str = "adjust"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {AXES}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if len({json.dumps(v) for v in self.values}) != len(self.values):
            raise ConfigError("sweep values must be distinct")
        if self.preprocessing_order not in PREPROCESSING:
            raise ConfigError(f"unknown preprocessing order {self.preprocessing_order!r}")
        if self.axis == "preprocessing_order":
            bad = [v for v in self.values if v not in PREPROCESSING]
            if bad:
                raise ConfigError(f"unknown preprocessing orders {bad}")
        if self.axis == "mask_scale":
            if isinstance(self.base_config, dict):
                self.base_config = tr.StageConfig.from_dict(self.base_config)
            self.base_config = self.base_config or tr.StageConfig.stage1()
            for v in self.values:
                pp.MaskSpec(scale=float(v))
        else:
            if isinstance(self.base_config, dict):
                self.base_config = SyncNetConfig.from_dict(self.base_config)
            self.base_config = self.base_config or SyncNetConfig.toy()

    def cell_config(self, index: int) -> dict:
        cfg = self.base_config.to_dict()
        if self.axis != "mask_scale":
            cfg["preprocessing_order"] = self.preprocessing_order
        cfg[self.axis] = self.values[index]
        cfg["seed"] = self.seed + index
        return cfg

    def cells(self) -> list:
        configs = [self.cell_config(i) for i in range(len(self.values))]
        check_controlled(configs, self.axis)
        return configs

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "values": list(self.values),
            "base_config": self.base_config.to_dict(),
            "seed": self.seed,
            "preprocessing_order": self.preprocessing_order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        unknown = set(d) - {"axis", "values", "base_config", "seed", "preprocessing_order"}
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**d)


def config_diff(a: dict, b: dict) -> set:
    return {k for k in set(a) | set(b) if a.get(k) != b.get(k)}


def check_controlled(configs: Sequence[dict], axis: str) -> None:
    """Cells may differ only on the swept axis (and their per-cell seed)."""
    for c in configs[1:]:
        extra = config_diff(configs[0], c) - {axis, "seed"}
        if extra:
            raise ConfigError(f"sweep cells differ on {sorted(extra)} besides {axis}")


# ------------------------------------------------------------ sync sweeps


def prepare_sync_clips(clips, order: str, crop_size: int = 64, scorer=None) -> list:
    """Frontalize and, unless ``no_adjust``, correct each clip's audio offset."""
    if order not in PREPROCESSING:
        raise ConfigError(f"unknown preprocessing order {order!r}")
    if order == "no_adjust":
        return pp.preprocess_corpus(clips, None, crop_size, adjust_offset=False)
    scorer = scorer or EnvelopeOracleScorer(frames=5)
    return pp.preprocess_corpus(
        clips, scorer, crop_size, adjust_offset=True, order="frontalize_first" if order == "adjust" else "scan_first", threshold=None
    )


@dataclass
class SweepResult:
    grid: SweepGrid
    out_dir: Optional[Path]
    cells: list  # summary dicts
    curves: dict = field(default_factory=dict)  # index -> Curves
    models: dict = field(default_factory=dict)  # index -> SyncNet

    def cell(self, value) -> dict:
        for c in self.cells:
            if c["value"] == value:
                return c
        raise KeyError(value)

    def final_val(self) -> dict:
        return {c["value"]: c["final_val"] for c in self.cells}


def _train_sync_cell(index, cfg_dict, train_corpus, val_corpus, cell_dir):
    started = time.time()
    summary = {"index": index, "seed": cfg_dict["seed"], "status": OK, "error": None}
    try:
        cfg = SyncNetConfig.from_dict({k: v for k, v in cfg_dict.items() if k != "preprocessing_order"})
        model, curves, _ = train_syncnet(cfg, train_corpus, val_corpus, run_dir=cell_dir)
        tm = trailing_mean(curves.train_losses())
        summary.update(
            final_train=float(tm[-1]),
            min_train=float(tm.min()),
            final_val=curves.final_val(),
            best_val=curves.best_val(),
            accuracy=evaluate_accuracy(model, make_val_set(val_corpus, ACCURACY_PAIRS, ACCURACY_SEED)),
            steps=cfg.steps,
        )
    except Exception as exc:  # a failing cell must not abort the sweep
        log.warning("sweep cell %d failed: %s", index, exc)
        model, curves = None, Curves()
        summary.update(status=FAILED, error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
    summary["seconds"] = round(time.time() - started, 2)
    return summary, curves, model


def sweep_syncnet(
    grid: SweepGrid,
    train_clips,
    val_clips,
    out_dir=None,
    crop_size: int = 64,
    scorer=None,
    autoencoder=None,
    workers: int = 1,
) -> SweepResult:
    """Train one sync network per grid value.

    ``train_clips``/``val_clips`` are ingested (not yet frontalized) clips.
    Training clips go through the cell's preprocessing; validation clips are
    always offset-adjusted so every cell is scored against true sync.
    """
    if grid.axis == "mask_scale":
        raise ConfigError("mask_scale sweeps belong to run_shortcut_experiment")
    configs = grid.cells()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "grid.json").write_text(json.dumps(grid.to_dict(), indent=2))
    autoencoder = autoencoder or PatchProjectionAutoencoder()
    prepared, corpora = {}, {}
    val_prepared = prepare_sync_clips(val_clips, "adjust", crop_size, scorer)

    def corpus_for(cfg, which):
        space, frames, order = cfg["input_space"], cfg["frames"], cfg["preprocessing_order"]
        key = (which, space, frames, order if which == "train" else "adjust")
        if key not in corpora:
            if which == "train":
                if order not in prepared:
                    prepared[order] = prepare_sync_clips(train_clips, order, crop_size, scorer)
                clips = prepared[order]
            else:
                clips = val_prepared
            enc = autoencoder.encode if space == "latent" else None
            corpora[key] = SyncCorpus.from_clips(clips, frames, crop_size, encoder=enc)
        return corpora[key]

    jobs = []
    for i, cfg in enumerate(configs):
        cell_dir = out_dir / f"cell_{i:02d}_{grid.axis}={grid.values[i]}" if out_dir else None
        if cell_dir:
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "config.json").write_text(json.dumps(cfg, indent=2))
        try:
            jobs.append((i, cfg, corpus_for(cfg, "train"), corpus_for(cfg, "val"), cell_dir))
        except Exception as exc:
            jobs.append((i, cfg, None, None, cell_dir, exc))

    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_sync_cell, *j[:5]) if len(j) == 5 else None for j in jobs]
            for j, fut in zip(jobs, futures):
                results.append(fut.result() if fut is not None else _failed(j))
    else:
        results = [_train_sync_cell(*j) if len(j) == 5 else _failed(j) for j in jobs]

    res = SweepResult(grid, out_dir, [])
    for (i, cfg, *_rest), (summary, curves, model) in zip(jobs, results):
        summary.update(axis=grid.axis, value=grid.values[i])
        res.cells.append(summary)
        res.curves[i] = curves
        if model is not None:
            res.models[i] = model
        if out_dir:
            cell_dir = _rest[2]
            if not (cell_dir / "curves.csv").exists():
                curves.write_csv(cell_dir / "curves.csv")
            (cell_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    if out_dir:
        write_table([{k: v for k, v in c.items() if k != "traceback"} for c in res.cells], out_dir / "summary.csv")
        plot_sweep(res, out_dir / "curves.png")
    return res


def _failed(job):
    i, cfg, exc = job[0], job[1], job[5]
    return {"index": i, "seed": cfg["seed"], "status": FAILED, "error": f"{type(exc).__name__}: {exc}", "seconds": 0.0}, Curves(), None


# -------------------------------------------------------- generator studies


def cross_generation_scores(model, schedule, autoencoder, clips, mask_spec, scorer=None, n_frames: int = 64, steps: int = 20, seed: int = 0) -> dict:
    """Drive clip ``i`` with the audio of clip ``i+1`` and score the result.

    Returns the mean sync confidence of generated crops against the driving
    audio and, for synthetic clips, the correlation of the generated mouth
    opening with the driving and with the original envelope.
    """
    if len(clips) < 2:
        raise ConfigError("cross generation needs at least two clips")
    scorer = scorer or EnvelopeOracleScorer(frames=5)
    conf, r_drive, r_orig = [], [], []
    for i, clip in enumerate(clips):
        drive = clips[(i + 1) % len(clips)]
        n = min(n_frames, clip.n_frames, drive.n_frames)
        mel = pp.log_mel(drive.audio[: n * pp.SAMPLES_PER_FRAME])
        gen = generate_crops(model, schedule, autoencoder, clip.frames[:n], mel, mask_spec, steps=steps, seed=seed)
        conf.append(ev.sync_confidence(gen, None, scorer, mel=mel))
        if "envelope" in drive.meta and "envelope" in clip.meta:
            dark = mouth_darkness(gen)
            r_drive.append(_corr(dark, drive.meta["envelope"][:n]))
            r_orig.append(_corr(dark, clip.meta["envelope"][:n]))
    out = {"sync_conf": float(np.mean(conf))}
    if r_drive:
        out.update(r_drive=float(np.mean(r_drive)), r_orig=float(np.mean(r_orig)))
    return out


def _corr(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.std() < 1e-12 or b.std() < 1e-12:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def reconstruction_trepa(model, schedule, autoencoder, clips, mask_spec, n_frames: int = 16, steps: int = 20, seed: int = 0, videnc=None) -> float:
    """Temporal metric: TREPA distance between generated and real 16-frame clips
    in the reconstruction setting."""
    videnc = videnc or TemporalVideoEncoder()
    vals = []
    for clip in clips:
        n = min(n_frames, clip.n_frames)
        gen = generate_crops(model, schedule, autoencoder, clip.frames[:n], pp.log_mel(clip.audio), mask_spec, steps=steps, seed=seed)
        with torch.no_grad():
            vals.append(float(trepa_loss(frames_to_tensor(gen)[None], frames_to_tensor(clip.frames[:n])[None], videnc)))
    return float(np.mean(vals))


def _flags(with_sync_supervision) -> tuple:
    if isinstance(with_sync_supervision, bool):
        return (with_sync_supervision,)
    flags = tuple(bool(f) for f in with_sync_supervision)
    if not flags:
        raise ConfigError("need at least one supervision flag")
    return flags


def run_shortcut_experiment(
    mask_scales: Sequence[float],
    with_sync_supervision,
    train_clips,
    eval_clips,
    syncnet=None,
    stage1: Optional[tr.StageConfig] = None,
    stage2: Optional[tr.StageConfig] = None,
    sync_weight: float = 0.05,
    autoencoder=None,
    out_dir=None,
    scorer=None,
    eval_frames: int = 64,
    ddim_steps: int = 20,
    seed: int = 0,
) -> list:
    """Train a toy generator per mask scale and report cross-generation sync.

    ``with_sync_supervision`` is a flag or a sequence of flags. Both arms run
    the same stage-2 schedule; the unsupervised arm sets the sync weight to
    zero. One stage-1 model per scale is shared by its arms. Clips are
    frontalized crops. Returns one row per (scale, flag).
    """
    flags = _flags(with_sync_supervision)
    if any(flags) and syncnet is None:
        raise ConfigError("sync supervision needs a trained sync network")
    grid = SweepGrid("mask_scale", [float(s) for s in mask_scales], stage1 or tr.StageConfig.stage1(), seed)
    cells = grid.cells()
    stage2 = stage2 or tr.StageConfig.stage2()
    autoencoder = autoencoder or PatchProjectionAutoencoder()
    out_dir = Path(out_dir) if out_dir else None
    rows = []
    for i, cfg1_dict in enumerate(cells):
        scale = grid.values[i]
        cfg1 = tr.StageConfig.from_dict(cfg1_dict)
        spec = cfg1.mask_spec
        corpus = tr.DiffusionCorpus.from_clips(train_clips, autoencoder, spec)
        res1 = tr.train_stage1(cfg1, corpus, autoencoder)
        for flag in flags:
            weights = replace(stage2.weights, sync=sync_weight if flag else 0.0)
            cfg2 = replace(stage2, mask_scale=scale, mask_shape=cfg1.mask_shape, weights=weights, seed=cfg1.seed, unet=cfg1.unet)
            started = time.time()
            res2 = tr.train_stage2(cfg2, corpus, res1, syncnet if flag else None, autoencoder)
            scores = cross_generation_scores(res2.model, res2.schedule, autoencoder, eval_clips, spec, scorer, eval_frames, ddim_steps, seed)
            row = {"mask_scale": scale, "sync_supervision": flag, "seed": cfg1.seed, **scores}
            row["stage1_final_simple"] = float(np.mean(res1.log.column("simple")[-50:]))
            row["seconds"] = round(time.time() - started, 2)
            rows.append(row)
            log.info("shortcut cell %s", row)
            if out_dir:
                cell_dir = out_dir / f"scale={scale}_sync={int(flag)}"
                cell_dir.mkdir(parents=True, exist_ok=True)
                (cell_dir / "config.json").write_text(json.dumps({"stage1": cfg1.to_dict(), "stage2": cfg2.to_dict()}, indent=2))
                res1.log.write_csv(cell_dir / "stage1_losses.csv")
                res2.log.write_csv(cell_dir / "stage2_losses.csv")
                (cell_dir / "summary.json").write_text(json.dumps(row, indent=2))
    if out_dir:
        write_table(rows, out_dir / "summary.csv")
        plot_shortcut(rows, out_dir / "shortcut.png")
    return rows


def metric_by_scale(rows: Sequence[dict], flag: bool, metric: str = "sync_conf") -> list:
    """Metric values ordered by mask scale for one supervision arm."""
    sel = sorted((r for r in rows if r["sync_supervision"] == flag), key=lambda r: r["mask_scale"])
    return [r[metric] for r in sel]


@dataclass
class SupervisionComparison:
    syncnet: dict  # space -> {final_val, best_val, accuracy}
    generator: dict  # none | pixel | latent -> scores
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def compare_supervision_spaces(
    train_clips,
    val_clips,
    eval_clips=None,
    syncnet_config: Optional[SyncNetConfig] = None,
    stage1: Optional[tr.StageConfig] = None,
    stage2: Optional[tr.StageConfig] = None,
    sync_weight: float = 0.05,
    seed: int = 0,
    autoencoder=None,
    out_dir=None,
    scorer=None,
    eval_frames: int = 64,
    ddim_steps: int = 20,
    syncnets: Optional[dict] = None,
) -> SupervisionComparison:
    """Train pixel- and latent-space sync networks on the same budget, then
    stage 2 three times from one stage-1 model: without sync loss, with the
    pixel network on decoded frames and with the latent network on the
    one-step clean latents. Clips are frontalized, offset-adjusted crops.

    ``syncnets`` may supply already trained {"pixel": ..., "latent": ...}
    networks together with their curves as (model, Curves) pairs.
    """
    autoencoder = autoencoder or PatchProjectionAutoencoder()
    eval_clips = eval_clips if eval_clips is not None else val_clips
    base = syncnet_config or SyncNetConfig.toy()
    nets, sync_rows = {}, {}
    for space in ("pixel", "latent"):
        if syncnets and space in syncnets:
            model, curves = syncnets[space]
        else:
            cfg = replace(base, input_space=space, seed=seed)
            enc = autoencoder.encode if space == "latent" else None
            tc = SyncCorpus.from_clips(train_clips, cfg.frames, cfg.input_size, encoder=enc)
            vc = SyncCorpus.from_clips(val_clips, cfg.frames, cfg.input_size, encoder=enc)
            model, curves, _ = train_syncnet(cfg, tc, vc, run_dir=Path(out_dir) / f"syncnet_{space}" if out_dir else None)
        nets[space] = model
        enc = autoencoder.encode if space == "latent" else None
        vc = SyncCorpus.from_clips(val_clips, model.config.frames, model.config.input_size, encoder=enc)
        sync_rows[space] = {
            "final_val": curves.final_val(),
            "best_val": curves.best_val(),
            "accuracy": evaluate_accuracy(model, make_val_set(vc, ACCURACY_PAIRS, ACCURACY_SEED)),
        }

    cfg1 = replace(stage1 or tr.StageConfig.stage1(), seed=seed)
    spec = cfg1.mask_spec
    corpus = tr.DiffusionCorpus.from_clips(train_clips, autoencoder, spec)
    res1 = tr.train_stage1(cfg1, corpus, autoencoder)
    stage2 = stage2 or tr.StageConfig.stage2()
    gen_rows = {}
    for arm in ("none", "pixel", "latent"):
        weights = replace(stage2.weights, sync=0.0 if arm == "none" else sync_weight)
        cfg2 = replace(
            stage2, seed=seed, weights=weights, sync_space="pixel" if arm == "none" else arm,
            mask_scale=cfg1.mask_scale, mask_shape=cfg1.mask_shape, unet=cfg1.unet,
        )
        res2 = tr.train_stage2(cfg2, corpus, res1, nets.get(arm), autoencoder)
        scores = cross_generation_scores(res2.model, res2.schedule, autoencoder, eval_clips, spec, scorer, eval_frames, ddim_steps, seed)
        scores["trepa"] = reconstruction_trepa(res2.model, res2.schedule, autoencoder, eval_clips, spec, steps=ddim_steps, seed=seed)
        gen_rows[arm] = scores
    result = SupervisionComparison(sync_rows, gen_rows, seed)
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "comparison.json").write_text(json.dumps(result.to_dict(), indent=2))
        write_table([{"supervision": k, **v} for k, v in gen_rows.items()], out_dir / "generator.csv")
        write_table([{"space": k, **v} for k, v in sync_rows.items()], out_dir / "syncnet.csv")
    return result


# ------------------------------------------------------------------ output


def write_table(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path


def read_table(path) -> list:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_sweep(result: SweepResult, path) -> Path:
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for c in result.cells:
        curves = result.curves.get(c["index"])
        if c["status"] != OK or curves is None or not curves.train:
            continue
        label = f"{result.grid.axis}={c['value']}"
        steps = [s for s, _ in curves.train]
        ax1.plot(steps, trailing_mean(curves.train_losses()), label=label)
        ax2.plot([s for s, _ in curves.val], curves.val_losses(), marker="o", label=label)
    for ax, title in ((ax1, "train loss (trailing mean)"), (ax2, "validation loss")):
        ax.axhline(np.log(2), color="gray", ls="--", lw=0.8)
        ax.set_xlabel("step")
        ax.set_title(title)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_shortcut(rows: Sequence[dict], path, metric: str = "sync_conf") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for flag in sorted({r["sync_supervision"] for r in rows}):
        sel = sorted((r for r in rows if r["sync_supervision"] == flag), key=lambda r: r["mask_scale"])
        ax.plot([r["mask_scale"] for r in sel], [r[metric] for r in sel], marker="o", label="with sync loss" if flag else "without sync loss")
    ax.set_xlabel("mask scale")
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
