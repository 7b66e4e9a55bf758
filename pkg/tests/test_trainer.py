import numpy as np
import pytest
import torch

from lipsync_ldm import preprocess as pp
from lipsync_ldm import trainer as tr
from lipsync_ldm.errors import ConfigError, IncompatibleWeights, TrainingDiverged
from lipsync_ldm.latent_diffusion import InpaintingUNet, PatchProjectionAutoencoder, UNetConfig
from lipsync_ldm.losses import LossWeights
from lipsync_ldm.stablesyncnet import SyncNet, SyncNetConfig

SMALL_UNET = UNetConfig(width=16, heads=2)


@pytest.fixture(scope="module")
def ae():
    return PatchProjectionAutoencoder()


@pytest.fixture(scope="module")
def corpus(small_crops, ae):
    return tr.DiffusionCorpus.from_clips(small_crops, ae, pp.MaskSpec())


@pytest.fixture(scope="module")
def stage1_result(corpus, ae):
    cfg = tr.StageConfig.stage1(steps=5, window=8, unet=SMALL_UNET)
    return tr.train_stage1(cfg, corpus, ae)


@pytest.fixture(scope="module")
def syncnet():
    torch.manual_seed(0)
    return SyncNet(SyncNetConfig.toy())


def test_stage_config_rules():
    with pytest.raises(ConfigError):
        tr.StageConfig.stage1(weights=LossWeights())
    with pytest.raises(ConfigError):
        tr.StageConfig(stage=3)
    with pytest.raises(ConfigError):
        tr.StageConfig.stage2(sync_space="audio")
    with pytest.raises(ConfigError):
        tr.StageConfig.from_dict({"stage": 1, "learning_rate": 1.0})
    with pytest.raises(ValueError):
        tr.StageConfig.stage1(mask_scale=0.0)
    cfg = tr.StageConfig.stage2(steps=7, unet=SMALL_UNET)
    assert tr.StageConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.losses_enabled == {"simple", "sync", "lpips", "trepa"}


def test_corpus_and_batch_shapes(corpus):
    assert corpus.mask.shape == (1, 1, 8, 8)
    b = tr.sample_batch(corpus, 2, 8, np.random.default_rng(0))
    assert b.pixels.shape == (2, 8, 3, 64, 64)
    assert b.latents.shape == b.masked_latents.shape == b.ref_latents.shape == (16, 4, 8, 8)
    assert b.mel.shape == (2, 80, 32)


def test_reference_frames_avoid_the_target_window(rng):
    for s in range(0, 50, 7):
        r = tr.sample_reference_indices(60, s, 8, rng)
        assert len(r) == 8 and np.all((r < s) | (r >= s + 8))
    assert set(tr.sample_reference_indices(8, 0, 8, rng)) <= set(range(8))


def test_masked_latent_hides_the_mouth(corpus):
    c = corpus.clips[0]
    lat_mask = corpus.mask[0, 0] > 0.99
    # masked latents agree across frames inside the mask; the real latents do not
    assert c.masked_latents[:, :, lat_mask].std(0).max() < 1e-5
    assert c.latents[:, :, lat_mask].std(0).max() > 1e-2


def test_stage1_trains_without_decoding(corpus, ae, tmp_path):
    cfg = tr.StageConfig.stage1(steps=4, window=8, unet=SMALL_UNET)
    res = tr.train_stage1(cfg, corpus, ae, run_dir=tmp_path)
    assert ae.decode_calls == 0
    assert res.model.temporal is None
    assert len(res.log.rows) == 4 and np.isnan(res.log.column("sync")).all()
    assert (tmp_path / "stage1.pt").exists() and (tmp_path / "stage1_losses.csv").exists()
    model, schedule, payload = tr.load_checkpoint(tmp_path / "stage1.pt")
    assert payload["stage"] == 1 and schedule.T == 1000
    for k, v in model.state_dict().items():
        assert torch.equal(v, res.model.state_dict()[k])


def test_stage1_resume_matches_uninterrupted_run(corpus, ae, tmp_path):
    full = tr.train_stage1(tr.StageConfig.stage1(steps=6, window=8, unet=SMALL_UNET), corpus, ae)
    tr.train_stage1(tr.StageConfig.stage1(steps=3, window=8, unet=SMALL_UNET), corpus, ae, run_dir=tmp_path)
    resumed = tr.train_stage1(tr.StageConfig.stage1(steps=6, window=8, unet=SMALL_UNET), corpus, ae, run_dir=tmp_path, resume=True)
    np.testing.assert_allclose(resumed.log.column("simple"), full.log.column("simple"), rtol=1e-5)
    for k, v in full.model.state_dict().items():
        torch.testing.assert_close(resumed.model.state_dict()[k], v)


def test_stage2_freezes_everything_but_temporal_and_audio(stage1_result, corpus, ae, syncnet):
    before = tr.snapshot(stage1_result.model)
    cfg = tr.StageConfig.stage2(steps=3, window=8, unet=SMALL_UNET)
    res = tr.train_stage2(cfg, corpus, stage1_result, syncnet, ae)
    assert res.model.trainable_groups() == set(tr.STAGE2_GROUPS)
    assert tr.changed_groups(before, res.model) <= set(tr.STAGE2_GROUPS)
    assert "audio_cross_attention" in tr.changed_groups(before, res.model)
    assert ae.decode_calls == 3  # one decode per 8-frame window
    for name in ("simple", "sync", "lpips", "trepa"):
        assert np.isfinite(res.log.column(name)).all()
    # the stage-1 model itself is untouched
    for k, v in stage1_result.model.state_dict().items():
        assert torch.equal(before[k], v)


def test_stage2_latent_supervision(stage1_result, corpus, ae):
    torch.manual_seed(0)
    latent_net = SyncNet(SyncNetConfig.toy(input_space="latent"))
    cfg = tr.StageConfig.stage2(steps=2, window=8, unet=SMALL_UNET, sync_space="latent", weights=LossWeights(1, 0.05, 0, 0))
    res = tr.train_stage2(cfg, corpus, stage1_result, latent_net, ae)
    assert np.isfinite(res.log.column("sync")).all()


def test_stage2_requires_syncnet_when_weighted(stage1_result, corpus):
    with pytest.raises(ConfigError):
        tr.train_stage2(tr.StageConfig.stage2(steps=1, window=8), corpus, stage1_result, None)


def test_stage2_from_checkpoint_path(corpus, ae, tmp_path, syncnet):
    tr.train_stage1(tr.StageConfig.stage1(steps=2, window=8, unet=SMALL_UNET), corpus, ae, run_dir=tmp_path)
    cfg = tr.StageConfig.stage2(steps=1, window=8, unet=SMALL_UNET, weights=LossWeights(1, 0, 0.1, 0))
    res = tr.train_stage2(cfg, corpus, tmp_path / "stage1.pt", None, ae, run_dir=tmp_path)
    assert (tmp_path / "stage2.pt").exists() and res.model.temporal is not None
    with pytest.raises(IncompatibleWeights):
        torch.save({"kind": "syncnet"}, tmp_path / "other.pt")
        tr.load_checkpoint(tmp_path / "other.pt")


def test_divergence_reports_component_and_checkpoint(stage1_result, corpus, ae, tmp_path):
    class Exploding(torch.nn.Module):
        def forward(self, x):
            return [x * float("inf")]

    cfg = tr.StageConfig.stage2(steps=2, window=8, unet=SMALL_UNET, weights=LossWeights(1, 0, 0.1, 0))
    with pytest.raises(TrainingDiverged) as info:
        tr.train_stage2(cfg, corpus, stage1_result, None, ae, run_dir=tmp_path, featnet=Exploding())
    assert info.value.component == "lpips"


def test_loss_log_round_trip(tmp_path):
    log = tr.LossLog()
    log.append(1, {"simple": 0.5}, 0.5)
    log.append(2, {"simple": 0.25, "sync": 0.1}, 0.3)
    log.write_csv(tmp_path / "l.csv")
    back = tr.LossLog.read_csv(tmp_path / "l.csv")
    assert back.column("step").tolist() == [1, 2]
    assert np.isnan(back.column("sync")[0]) and back.column("sync")[1] == pytest.approx(0.1)
