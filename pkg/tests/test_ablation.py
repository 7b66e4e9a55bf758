import json

import numpy as np
import pytest
import torch

from lipsync_ldm import ablation as ab
from lipsync_ldm import trainer as tr
from lipsync_ldm.errors import ConfigError
from lipsync_ldm.latent_diffusion import UNetConfig
from lipsync_ldm.stablesyncnet import SyncNet, SyncNetConfig

SMALL_UNET = UNetConfig(width=16, heads=2)
TINY_SYNC = SyncNetConfig.toy(steps=3, batch_size=8, val_pairs=16, val_every=1, warmup_steps=0)


def test_grid_cells_differ_only_on_axis_and_seed():
    grid = ab.SweepGrid("embed_dim", [16, 32, 64], TINY_SYNC, seed=4)
    cells = grid.cells()
    assert [c["embed_dim"] for c in cells] == [16, 32, 64]
    assert [c["seed"] for c in cells] == [4, 5, 6]
    assert ab.config_diff(cells[0], cells[2]) == {"embed_dim", "seed"}
    assert ab.SweepGrid.from_dict(json.loads(json.dumps(grid.to_dict()))).cells() == cells


def test_grid_rejects_bad_axes_and_values():
    with pytest.raises(ConfigError):
        ab.SweepGrid("learning_rate", [1, 2])
    with pytest.raises(ConfigError):
        ab.SweepGrid("embed_dim", [16, 16])
    with pytest.raises(ConfigError):
        ab.SweepGrid("preprocessing_order", ["adjust", "sideways"])
    with pytest.raises(ConfigError):
        ab.SweepGrid("mask_scale", [0.5, 1.5])
    with pytest.raises(ConfigError):
        ab.check_controlled([{"a": 1, "b": 1}, {"a": 2, "b": 2}], "a")


def test_prepare_sync_clips_orders(small_corpus, oracle):
    from lipsync_ldm import synthdata as sd

    shifted = [sd.shift_audio(c, 3) for c in small_corpus]
    adjusted = ab.prepare_sync_clips(shifted, "adjust", 64, oracle)
    raw = ab.prepare_sync_clips(shifted, "no_adjust", 64)
    assert all(c.meta["applied_offset"] == -3 for c in adjusted)
    assert all("applied_offset" not in c.meta for c in raw)
    assert adjusted[0].frames.shape[1:] == (64, 64, 3)


def test_sweep_writes_outputs_and_isolates_failures(small_corpus, tmp_path):
    grid = ab.SweepGrid("frames", [5, 500], TINY_SYNC)
    res = ab.sweep_syncnet(grid, small_corpus, small_corpus[:2], tmp_path)
    ok, bad = res.cell(5), res.cell(500)
    assert ok["status"] == ab.OK and np.isfinite(ok["final_val"]) and 0 <= ok["accuracy"] <= 1
    assert bad["status"] == ab.FAILED and "ConfigError" in bad["error"]
    assert (tmp_path / "grid.json").exists() and (tmp_path / "curves.png").exists()
    rows = ab.read_table(tmp_path / "summary.csv")
    assert [r["status"] for r in rows] == [ab.OK, ab.FAILED]
    cell_dirs = sorted(p for p in tmp_path.iterdir() if p.is_dir())
    assert all((d / "config.json").exists() and (d / "summary.json").exists() for d in cell_dirs)
    with pytest.raises(ConfigError):
        ab.sweep_syncnet(ab.SweepGrid("mask_scale", [0.5]), small_corpus, small_corpus)


def test_shortcut_experiment_rows(small_crops, tmp_path):
    torch.manual_seed(0)
    net = SyncNet(SyncNetConfig.toy())
    rows = ab.run_shortcut_experiment(
        [0.5, 1.0], (False, True), small_crops, small_crops[:2], net,
        stage1=tr.StageConfig.stage1(steps=2, window=8, unet=SMALL_UNET),
        stage2=tr.StageConfig.stage2(steps=1, window=8, unet=SMALL_UNET),
        out_dir=tmp_path, eval_frames=40, ddim_steps=2,
    )
    assert len(rows) == 4
    assert {(r["mask_scale"], r["sync_supervision"]) for r in rows} == {(0.5, False), (0.5, True), (1.0, False), (1.0, True)}
    assert all(np.isfinite(r["sync_conf"]) and -1 <= r["r_drive"] <= 1 for r in rows)
    assert len(ab.metric_by_scale(rows, False)) == 2
    assert (tmp_path / "summary.csv").exists() and (tmp_path / "shortcut.png").exists()
    with pytest.raises(ConfigError):
        ab.run_shortcut_experiment([1.0], True, small_crops, small_crops, None)


def test_supervision_comparison(small_crops, tmp_path):
    res = ab.compare_supervision_spaces(
        small_crops, small_crops[:2], syncnet_config=TINY_SYNC,
        stage1=tr.StageConfig.stage1(steps=2, window=8, unet=SMALL_UNET),
        stage2=tr.StageConfig.stage2(steps=1, window=8, unet=SMALL_UNET),
        out_dir=tmp_path, eval_frames=40, ddim_steps=2,
    )
    assert set(res.syncnet) == {"pixel", "latent"} and set(res.generator) == {"none", "pixel", "latent"}
    assert all(np.isfinite(v["trepa"]) for v in res.generator.values())
    assert json.loads((tmp_path / "comparison.json").read_text())["seed"] == 0


def test_metric_by_scale_orders_rows():
    rows = [
        {"mask_scale": 1.0, "sync_supervision": False, "sync_conf": 3.0},
        {"mask_scale": 0.5, "sync_supervision": False, "sync_conf": 1.0},
        {"mask_scale": 0.5, "sync_supervision": True, "sync_conf": 9.0},
    ]
    assert ab.metric_by_scale(rows, False) == [1.0, 3.0]
    assert ab.metric_by_scale(rows, True) == [9.0]
