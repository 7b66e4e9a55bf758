"""Command line entry point: ``lipsync-ldm <command> [options]``.

Every command accepts ``--config`` (YAML or JSON) and writes the resolved
configuration to its run directory. Failures print one JSON record on stderr
and exit with a stable code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import errors
from .config import RunConfig, load_config, section_keys

log = logging.getLogger("lipsync_ldm")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_QUALITY = 5
EXIT_DIVERGED = 6
EXIT_WEIGHTS = 7

EXIT_CODES = [
    (errors.ConfigError, EXIT_CONFIG),
    (errors.IngestError, EXIT_INPUT),
    (FileNotFoundError, EXIT_INPUT),
    (errors.QualityError, EXIT_QUALITY),
    (errors.TrainingDiverged, EXIT_DIVERGED),
    (errors.IncompatibleWeights, EXIT_WEIGHTS),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    for kind, code in EXIT_CODES:
        if isinstance(exc, kind):
            return code
    return EXIT_OTHER


def error_record(exc: BaseException, command: str | None) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code_for(exc), "command": command}
    if isinstance(exc, errors.TrainingDiverged):
        rec["component"] = exc.component
        rec["last_good_checkpoint"] = str(exc.last_good_checkpoint) if exc.last_good_checkpoint else None
    return rec


# ----------------------------------------------------------------- helpers


def _resolve(args, section: str, allowed) -> tuple[RunConfig, dict]:
    """Merge the config file section with command-line overrides (flags win)."""
    cfg = load_config(args.config) if args.config else RunConfig()
    values = section_keys(getattr(cfg, section), allowed, section)
    for key in allowed:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    setattr(cfg, section, values)
    return cfg, values


def _run_dir(args, cfg: RunConfig) -> Path:
    d = Path(getattr(args, "run_dir", None) or cfg.run_dir or "runs/latest")
    d.mkdir(parents=True, exist_ok=True)
    cfg.run_dir = str(d)
    return d


def _scorer(spec: str | None):
    """``oracle`` (default) or a path to a trained sync network checkpoint."""
    from .stablesyncnet import SyncNetScorer
    from .synthdata import EnvelopeOracleScorer

    if spec in (None, "oracle"):
        return EnvelopeOracleScorer()
    model = _load_syncnet(spec)
    encoder = None
    if model.config.input_space == "latent":
        from .latent_diffusion import PatchProjectionAutoencoder

        encoder = PatchProjectionAutoencoder(factor=model.config.latent_factor).encode
    return SyncNetScorer(model, encoder=encoder)


def _load_syncnet(path):
    import torch

    from .stablesyncnet.train import load_checkpoint

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sync network checkpoint {path} not found")
    try:
        return load_checkpoint(path)
    except errors.ConfigError as exc:
        raise errors.IncompatibleWeights(str(exc)) from exc
    except (RuntimeError, KeyError, torch.serialization.pickle.UnpicklingError) as exc:
        raise errors.IncompatibleWeights(f"{path}: {exc}") from exc


def _literal(x):
    if not isinstance(x, str):
        return x
    try:
        return json.loads(x)
    except json.JSONDecodeError:
        return x


def _clean(obj):
    """Strict JSON: NaN becomes null."""
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _print(obj):
    print(json.dumps(_clean(obj), indent=2, default=str))


# ----------------------------------------------------------------- commands

SYNTH_KEYS = ("n_clips", "frames_per_clip", "frame_size", "noise_level", "rotation_deg", "translation", "yaw", "pitch", "articulation", "misalign")


def cmd_synth(args):
    from . import preprocess as pp
    from . import synthdata as sd

    cfg, v = _resolve(args, "synth", SYNTH_KEYS)
    misalign = v.pop("misalign", None)
    spec = sd.SynthSpec(seed=cfg.seed, **v)
    clips = sd.generate_corpus(spec)
    if misalign:
        clips = sd.misalign_corpus(clips, 1, int(misalign), seed=cfg.seed)
    out = Path(args.out)
    pp.save_corpus(clips, out)
    cfg.save(out / "config.json")
    _print({"clips": len(clips), "out": str(out)})


PREPROCESS_KEYS = ("crop_size", "order", "threshold", "search_range", "adjust_offset", "scorer")


def cmd_preprocess(args):
    from . import preprocess as pp

    cfg, v = _resolve(args, "preprocess", PREPROCESS_KEYS)
    clips = pp.load_corpus(args.input)
    order = v.get("order", "frontalize_first")
    out = pp.preprocess_corpus(
        clips,
        scorer=_scorer(v.get("scorer")),
        out_size=int(v.get("crop_size", pp.DEFAULT_CROP)),
        adjust_offset=bool(v.get("adjust_offset", True)),
        order=order,
        threshold=v.get("threshold", pp.DEFAULT_CONF_THRESHOLD),
        search_range=int(v.get("search_range", pp.DEFAULT_SEARCH_RANGE)),
    )
    if not out:
        raise errors.QualityError("every clip fell below the sync confidence threshold")
    dest = Path(args.out)
    pp.save_corpus(out, dest)
    cfg.save(dest / "config.json")
    _print({"kept": len(out), "dropped": len(clips) - len(out), "out": str(dest)})


def _syncnet_config(cfg: RunConfig, overrides: dict):
    from .stablesyncnet import SyncNetConfig

    base = SyncNetConfig.toy().to_dict()
    base.update(section_keys(cfg.syncnet, base.keys(), "syncnet"))
    base.update(overrides)
    base["seed"] = cfg.seed
    return SyncNetConfig.from_dict(base)


def cmd_train_syncnet(args):
    from . import preprocess as pp
    from .latent_diffusion import PatchProjectionAutoencoder
    from .stablesyncnet import SyncCorpus, train_syncnet
    from .stablesyncnet.train import evaluate_accuracy, make_val_set

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    overrides = {k: getattr(args, k) for k in ("steps", "input_space", "embed_dim", "batch_size") if getattr(args, k) is not None}
    sc = _syncnet_config(cfg, overrides)
    cfg.syncnet = sc.to_dict()
    run_dir = _run_dir(args, cfg)
    cfg.save(run_dir / "config.json")
    encoder = PatchProjectionAutoencoder(factor=sc.latent_factor).encode if sc.input_space == "latent" else None
    train = SyncCorpus.from_clips(pp.load_corpus(args.train), sc.frames, sc.input_size, encoder)
    val = SyncCorpus.from_clips(pp.load_corpus(args.val), sc.frames, sc.input_size, encoder) if args.val else None
    model, curves, _ = train_syncnet(sc, train, val, run_dir=run_dir, label_shuffle=args.label_shuffle)
    acc = evaluate_accuracy(model, make_val_set(val or train, 512, sc.seed + 5))
    summary = {"final_val_loss": curves.val[-1][1] if curves.val else None, "accuracy": acc, "checkpoint": str(run_dir / "syncnet_best.pt")}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    _print(summary)


def _stage_config(cfg: RunConfig, stage: int, overrides: dict):
    from . import trainer as tr

    section = cfg.stage1 if stage == 1 else cfg.stage2
    base = (tr.StageConfig.stage1 if stage == 1 else tr.StageConfig.stage2)().to_dict()
    base.update(section_keys(section, base.keys(), f"stage{stage}"))
    sync_weight = overrides.pop("sync_weight", None)
    base.update(overrides)
    if sync_weight is not None:
        base["weights"] = {**base["weights"], "sync": sync_weight}
    base["seed"] = cfg.seed
    return tr.StageConfig.from_dict(base)


def _stage_overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("steps", "window", "mask_scale", "sync_space") if getattr(args, k, None) is not None}


def cmd_train_stage(args):
    from . import preprocess as pp
    from . import trainer as tr
    from .latent_diffusion import PatchProjectionAutoencoder

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    stage = 1 if args.command == "train-stage1" else 2
    overrides = _stage_overrides(args)
    if getattr(args, "sync_weight", None) is not None:
        overrides["sync_weight"] = args.sync_weight
    sc = _stage_config(cfg, stage, overrides)
    setattr(cfg, f"stage{stage}", sc.to_dict())
    run_dir = _run_dir(args, cfg)
    cfg.save(run_dir / "config.json")
    ae = PatchProjectionAutoencoder()
    corpus = tr.DiffusionCorpus.from_clips(pp.load_corpus(args.data), ae, sc.mask_spec)
    if stage == 1:
        res = tr.train_stage1(sc, corpus, ae, run_dir=run_dir, resume=args.resume)
    else:
        if not Path(args.stage1).exists():
            raise FileNotFoundError(f"stage-1 checkpoint {args.stage1} not found")
        syncnet = _load_syncnet(args.syncnet) if args.syncnet else None
        res = tr.train_stage2(sc, corpus, Path(args.stage1), syncnet, ae, run_dir=run_dir, resume=args.resume)
    last = res.log.rows[-1] if res.log.rows else {}
    _print({"stage": stage, "steps": len(res.log.rows), "last": last, "checkpoint": str(run_dir / f"stage{stage}.pt")})


def cmd_infer(args):
    from . import preprocess as pp
    from . import trainer as tr
    from .latent_diffusion import PatchProjectionAutoencoder, lipsync_video

    cfg, v = _resolve(args, "infer", ("steps", "crop_size", "mask_scale"))
    model, schedule, payload = tr.load_checkpoint(args.checkpoint)
    clip = pp.ingest(args.clip)
    audio, rate = pp.read_wav(args.audio)
    audio = pp.resample_audio(audio, rate)
    stage_cfg = payload.get("stage_config") or {}
    mask = pp.MaskSpec(stage_cfg.get("mask_shape", "full_face_rounded"), float(v.get("mask_scale", stage_cfg.get("mask_scale", 1.0))))
    out = lipsync_video(
        clip, audio, model, schedule, PatchProjectionAutoencoder(), mask,
        crop_size=int(v.get("crop_size", 64)), steps=int(v.get("steps", 20)), seed=cfg.seed,
    )
    dest = pp.save_clip(out, args.out)
    cfg.save(Path(args.out) / "config.json")
    _print({"frames": out.n_frames, "fps": out.fps, "out": str(dest)})


def cmd_ablate(args):
    from . import ablation as ab
    from . import preprocess as pp

    cfg, v = _resolve(args, "ablate", ("axis", "values", "preprocessing_order", "workers"))
    if "axis" not in v or "values" not in v:
        raise errors.ConfigError("ablate needs an axis and values")
    values = [_literal(x) for x in v["values"]]
    run_dir = _run_dir(args, cfg)
    cfg.save(run_dir / "config.json")
    if v["axis"] == "mask_scale":
        stage1 = _stage_config(cfg, 1, {})
        stage2 = _stage_config(cfg, 2, {})
        syncnet = _load_syncnet(args.syncnet) if args.syncnet else None
        rows = ab.run_shortcut_experiment(
            [float(x) for x in values], (False, True) if syncnet is not None else (False,),
            pp.load_corpus(args.train), pp.load_corpus(args.val), syncnet,
            stage1=stage1, stage2=stage2, out_dir=run_dir, seed=cfg.seed,
        )
        _print(rows)
        return
    grid = ab.SweepGrid(v["axis"], values, _syncnet_config(cfg, {}), cfg.seed, v.get("preprocessing_order", "adjust"))
    res = ab.sweep_syncnet(grid, pp.load_corpus(args.train), pp.load_corpus(args.val), run_dir, workers=int(v.get("workers", 1)))
    _print(res.cells)


def cmd_eval(args):
    from . import evalsuite as ev
    from . import preprocess as pp

    cfg, v = _resolve(args, "eval", ("setting", "scorer", "fid"))
    gen = pp.load_corpus(args.gen)
    ref = pp.load_corpus(args.ref)
    if len(gen) != len(ref):
        raise errors.ConfigError(f"{len(gen)} generated clips but {len(ref)} references")
    embedder = ev.RandomProjectionEmbedder() if v.get("fid") else None
    report = ev.evaluate_clips(gen, ref, _scorer(v.get("scorer")), v.get("setting", "reconstruction"), embedder)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(report.table())


def cmd_report(args):
    """Print the tables and summaries already written under a run directory."""
    d = Path(args.run_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"run directory {d} not found")
    found = False
    for p in sorted(d.rglob("*.json")):
        if p.name in ("summary.json",) or p.name.endswith("report.json"):
            print(f"## {p.relative_to(d)}")
            print(p.read_text())
            found = True
    for p in sorted(d.rglob("summary.csv")):
        print(f"## {p.relative_to(d)}")
        print(p.read_text())
        found = True
    if not found:
        raise errors.IngestError(f"no summaries under {d}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lipsync-ldm", description="Desk-scale lip-sync latent diffusion training stack")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, run_dir=True):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--seed", type=int)
        if run_dir:
            sp.add_argument("--run-dir")

    s = sub.add_parser("synth", help="generate a synthetic talking-face corpus")
    common(s, run_dir=False)
    s.add_argument("--out", required=True)
    s.add_argument("--n-clips", dest="n_clips", type=int)
    s.add_argument("--frames", dest="frames_per_clip", type=int)
    s.add_argument("--size", dest="frame_size", type=int)
    s.add_argument("--noise", dest="noise_level", type=float)
    s.add_argument("--articulation", type=float, help="std of lip and cheek motion absent from the audio")
    s.add_argument("--rotation", dest="rotation_deg", type=float)
    s.add_argument("--translation", type=float)
    s.add_argument("--yaw", type=float)
    s.add_argument("--pitch", choices=("varying", "per_clip"))
    s.add_argument("--misalign", type=int, help="shift each clip's audio by up to this many frames")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="frontalize, offset-correct and filter clips")
    common(s, run_dir=False)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--crop-size", type=int)
    s.add_argument("--order", choices=("frontalize_first", "scan_first"))
    s.add_argument("--threshold", type=float)
    s.add_argument("--search-range", type=int)
    s.add_argument("--no-adjust", dest="adjust_offset", action="store_const", const=False)
    s.add_argument("--scorer", help="'oracle' or a sync network checkpoint")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train-syncnet", help="train the sync network")
    common(s)
    s.add_argument("--train", required=True)
    s.add_argument("--val")
    s.add_argument("--steps", type=int)
    s.add_argument("--space", dest="input_space", choices=("pixel", "latent"))
    s.add_argument("--embed-dim", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--label-shuffle", action="store_true")
    s.set_defaults(func=cmd_train_syncnet)

    for name, helptext in (("train-stage1", "train the inpainting U-Net (stage 1)"), ("train-stage2", "fine-tune with pixel losses (stage 2)")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--data", required=True)
        s.add_argument("--steps", type=int)
        s.add_argument("--window", type=int)
        s.add_argument("--mask-scale", type=float)
        s.add_argument("--resume", action="store_true")
        if name == "train-stage2":
            s.add_argument("--stage1", required=True)
            s.add_argument("--syncnet")
            s.add_argument("--sync-weight", type=float)
            s.add_argument("--sync-space", choices=("pixel", "latent"))
        s.set_defaults(func=cmd_train_stage)

    s = sub.add_parser("infer", help="re-render a clip to match new audio")
    common(s, run_dir=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--audio", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--crop-size", type=int)
    s.add_argument("--mask-scale", type=float)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("ablate", help="one-axis sweep of sync network or mask settings")
    common(s)
    s.add_argument("--axis")
    s.add_argument("--values", nargs="+")
    s.add_argument("--preprocessing-order", dest="preprocessing_order")
    s.add_argument("--workers", type=int)
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--syncnet", help="sync network for the supervised arm of a mask_scale sweep")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("eval", help="score generated clips against references")
    common(s, run_dir=False)
    s.add_argument("--gen", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--setting", choices=("reconstruction", "cross_generation"))
    s.add_argument("--scorer")
    s.add_argument("--fid", action="store_true", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="print summaries found under a run directory")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    command = None
    run_dir = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        run_dir = getattr(args, "run_dir", None)
        args.func(args)
        return EXIT_OK
    except KeyboardInterrupt:
        raise
    except BaseException as exc:  # noqa: BLE001 - every failure maps to an exit code
        if isinstance(exc, SystemExit):
            if exc.code in (0, None):  # --help
                return EXIT_OK
            raise
        rec = error_record(exc, command)
        if rec["exit_code"] == EXIT_OTHER:
            rec["traceback"] = traceback.format_exc(limit=5)
        print(json.dumps(rec), file=sys.stderr)
        if run_dir and command != "report":
            try:
                Path(run_dir).mkdir(parents=True, exist_ok=True)
                (Path(run_dir) / "error.json").write_text(json.dumps(rec, indent=2))
            except OSError:
                pass
        return rec["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
