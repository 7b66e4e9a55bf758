import numpy as np
import pytest
import torch

from lipsync_ldm import preprocess as pp
from lipsync_ldm.errors import BoundsError, ConfigError, IncompatibleWeights, ShapeError
from lipsync_ldm.latent_diffusion import (
    CONTEXT_DIM,
    Conditions,
    InpaintingUNet,
    MelFrameEncoder,
    PatchProjectionAutoencoder,
    UNetConfig,
    ancestral_loop,
    assemble_unet_input,
    audio_context,
    build_audio_window,
    ddim_loop,
    ddim_sample,
    downsample_mask,
    estimate_z0,
    forward_diffuse,
    gaussian_eps_fn,
    generate_crops,
    init_model,
    make_schedule,
    split_unet_input,
    timestep_sequence,
)
from lipsync_ldm.latent_diffusion.schedule import NoiseSchedule


@pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
def test_schedule_shapes_and_monotonicity(kind):
    s = make_schedule(1000, kind)
    assert s.T == 1000 and s.kind == kind
    assert np.all(np.diff(s.alphas_cumprod) < 0)
    assert 0 < s.alphas_cumprod[-1] < s.alphas_cumprod[0] < 1
    again = NoiseSchedule.from_dict(s.to_dict())
    np.testing.assert_allclose(again.alphas_cumprod, s.alphas_cumprod, rtol=1e-12)
    np.testing.assert_allclose(NoiseSchedule.from_alphas_cumprod(s.alphas_cumprod).betas, s.betas, rtol=1e-9)


def test_schedule_rejects_bad_input():
    with pytest.raises(ConfigError):
        make_schedule(10, "cosine")
    s = make_schedule(10)
    with pytest.raises(BoundsError):
        s.alpha_bar(10, torch.zeros(1))
    with pytest.raises(BoundsError):
        forward_diffuse(torch.zeros(1, 4), torch.tensor([-1]), torch.zeros(1, 4), s)


def test_inversion_in_float64_is_exact():
    s = make_schedule()
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(256, 4, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(256, 4, 8, 8, generator=g, dtype=torch.float64)
    t = torch.randint(0, 1000, (256,), generator=g)
    rec = estimate_z0(forward_diffuse(z0, t, eps, s), eps, t, s)
    assert (rec - z0).abs().max() < 1e-9


def test_autoencoder_is_a_projection():
    ae = PatchProjectionAutoencoder()
    x = torch.rand(3, 3, 64, 64) * 2 - 1
    z = ae.encode(x)
    assert z.shape == (3, 4, 8, 8)
    y = ae.decode(z)
    torch.testing.assert_close(ae.encode(y), z, atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(ae.decode(ae.encode(y)), y, atol=1e-5, rtol=1e-5)
    assert ae.decode_calls == 2 and ae.decoded_frames == 6
    ae.reset_counters()
    assert ae.decode_calls == 0


def test_autoencoder_keeps_mouth_darkness(small_crops):
    from lipsync_ldm.latent_diffusion.pipeline import to_uint8
    from lipsync_ldm.stablesyncnet.data import frames_to_tensor
    from lipsync_ldm.synthdata import mouth_darkness

    c = small_crops[0]
    ae = PatchProjectionAutoencoder()
    rec = to_uint8(ae(frames_to_tensor(c.frames)))
    r = np.corrcoef(mouth_darkness(rec), c.meta["mouth_height"])[0, 1]
    assert r > 0.95


def test_unet_input_assembly_round_trip():
    z = torch.randn(2, 4, 8, 8)
    m = torch.rand(1, 1, 8, 8)
    ml, ref = torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8)
    x = assemble_unet_input(z, m, ml, ref)
    assert x.shape == (2, 13, 8, 8)
    a, b, c, d = split_unet_input(x)
    assert torch.equal(a, z) and torch.equal(b, m.expand(2, -1, -1, -1)) and torch.equal(c, ml) and torch.equal(d, ref)
    with pytest.raises(ShapeError):
        assemble_unet_input(z, m, ml[:, :3], ref)
    with pytest.raises(ShapeError):
        assemble_unet_input(z, m, ml, torch.randn(2, 4, 4, 4))


def test_downsample_mask_matches_area_average():
    spec = pp.MaskSpec(scale=1.0)
    pix = pp.mask_channel(spec, 64)
    lat = downsample_mask(pix, 8)[0, 0].numpy()
    ref = pix.reshape(8, 8, 8, 8).mean(axis=(1, 3))
    np.testing.assert_allclose(lat, ref, atol=1e-6)


def test_audio_window_replicates_edges():
    emb = torch.arange(6, dtype=torch.float32)[:, None].expand(6, 3)
    w = build_audio_window(emb, 0, 2)
    assert w[:, 0].tolist() == [0, 0, 0, 1, 2]
    ctx = audio_context(emb, 2)
    assert ctx.shape == (6, 5, 3)
    assert ctx[5, :, 0].tolist() == [3, 4, 5, 5, 5]
    for f in range(6):
        assert torch.equal(ctx[f], build_audio_window(emb, f, 2))
    with pytest.raises(IndexError):
        build_audio_window(emb, 6, 2)


def test_mel_encoder_shapes():
    enc = MelFrameEncoder()
    out = enc(torch.randn(2, 80, 4 * 7))
    assert out.shape == (2, 7, CONTEXT_DIM)
    with pytest.raises(ShapeError):
        enc(torch.randn(80, 30))


def _inputs(n=4, ctx=384):
    return torch.randn(n, 13, 8, 8), torch.randint(0, 1000, (n,)), torch.randn(n, 5, ctx)


def test_unet_forward_and_validation():
    torch.manual_seed(0)
    model = InpaintingUNet(UNetConfig(width=16, heads=2))
    x, t, ctx = _inputs()
    assert model(x, t, ctx).shape == (4, 4, 8, 8)
    with pytest.raises(ShapeError):
        model(x[:, :12], t, ctx)
    with pytest.raises(ShapeError):
        model(x, t, ctx[..., :100])
    with pytest.raises(ShapeError):
        model(x, t, ctx[:2])


def test_unet_output_depends_on_audio_context():
    torch.manual_seed(0)
    model = InpaintingUNet(UNetConfig(width=16, heads=2))
    x, t, ctx = _inputs()
    assert not torch.allclose(model(x, t, ctx), model(x, t, torch.randn_like(ctx)))


def test_temporal_layers_start_as_identity():
    torch.manual_seed(0)
    model = InpaintingUNet(UNetConfig(width=16, heads=2))
    x, t, ctx = _inputs(8)
    before = model(x, t, ctx, n_frames=4)
    model.add_temporal_layers()
    assert model.config.temporal
    torch.testing.assert_close(model(x, t, ctx, n_frames=4), before)
    assert "temporal" in model.parameter_groups()


def test_temporal_layers_mix_frames_once_trained():
    torch.manual_seed(0)
    model = InpaintingUNet(UNetConfig(width=16, heads=2, temporal=True))
    with torch.no_grad():
        for p in model.temporal.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    x, t, ctx = _inputs(8)
    base = model(x, t, ctx, n_frames=4)
    x2 = x.clone()
    x2[1] += 1.0
    out = model(x2, t, ctx, n_frames=4)
    assert not torch.allclose(out[0], base[0])  # same clip
    torch.testing.assert_close(out[4:], base[4:])  # other clip


def test_set_trainable_and_groups():
    model = InpaintingUNet(UNetConfig(width=16, heads=2, temporal=True))
    model.set_trainable(["temporal", "audio_cross_attention"])
    assert model.trainable_groups() == {"temporal", "audio_cross_attention"}
    with pytest.raises(ConfigError):
        model.set_trainable(["attention"])


def test_init_model_reinitializes_input_and_cross_attention():
    cfg = UNetConfig(width=16, heads=2)
    src = init_model(cfg, seed=1).state_dict()
    model = init_model(cfg, pretrained=src, seed=2)
    for k, v in model.state_dict().items():
        group = k.split(".", 1)[0]
        if group in ("conv_in", "audio_cross_attention"):
            if v.dtype.is_floating_point and v.numel() > 1 and "norm" not in k and "bias" not in k:
                assert not torch.equal(v, src[k]), k
        else:
            assert torch.equal(v, src[k]), k
    bad = {k: v for k, v in src.items() if not k.startswith("mid.0.")}
    with pytest.raises(IncompatibleWeights):
        init_model(cfg, pretrained=bad)
    wrong = init_model(UNetConfig(width=32, heads=2)).state_dict()
    with pytest.raises(IncompatibleWeights):
        init_model(cfg, pretrained=wrong)


def test_timestep_sequence():
    ts = timestep_sequence(1000, 20)
    assert len(ts) == 20 and ts[0] == 999 and ts[-1] == 0 and np.all(np.diff(ts) < 0)
    assert len(timestep_sequence(10, 10)) == 10
    with pytest.raises(ConfigError):
        timestep_sequence(10, 11)


def test_ddim_matches_ancestral_on_gaussian_data():
    """With an exact score for N(mu, sigma^2) both samplers started from the
    exact terminal marginal return samples of the data distribution."""
    s = make_schedule(1000, "linear")
    mu, sigma = 1.5, 0.3
    eps_fn = gaussian_eps_fn(mu, sigma, s)
    g = torch.Generator().manual_seed(0)
    n = 20000
    abT = float(s.alphas_cumprod[-1])
    zT = np.sqrt(abT) * mu + np.sqrt(abT * sigma**2 + 1 - abT) * torch.randn(n, generator=g, dtype=torch.float64)
    d = ddim_loop(eps_fn, zT.clone(), s, 1000)
    a = ancestral_loop(eps_fn, zT.clone(), s, g)
    # few steps keep the mean but shrink the spread
    short = ddim_loop(eps_fn, zT.clone(), s, 20)
    assert abs(float(short.mean()) - mu) < 0.01 and float(short.std()) < sigma
    for x in (d, a):
        assert abs(float(x.mean()) - mu) < 0.01
        assert abs(float(x.std()) - sigma) < 0.01
    q = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    assert (torch.quantile(d, q) - torch.quantile(a, q)).abs().max() < 0.02


def _tiny_conditions(n=4):
    ae = PatchProjectionAutoencoder()
    px = torch.rand(n, 3, 64, 64) * 2 - 1
    m = torch.tensor(pp.mask_channel(pp.MaskSpec(), 64))
    return Conditions(downsample_mask(m, 8), ae.encode(px * (1 - m)), ae.encode(px), torch.randn(n, 5, 384))


def test_ddim_sample_is_deterministic():
    torch.manual_seed(0)
    model = InpaintingUNet(UNetConfig(width=16, heads=2))
    cond = _tiny_conditions()
    s = make_schedule()
    a = ddim_sample(model, cond, s, steps=5, seed=3)
    b = ddim_sample(model, cond, s, steps=5, seed=3)
    c = ddim_sample(model, cond, s, steps=5, seed=4)
    assert torch.equal(a, b) and not torch.equal(a, c)
    with pytest.raises(ConfigError):
        ddim_sample(model, cond, s, steps=0)


def test_generate_crops_changes_only_masked_pixels(small_crops):
    torch.manual_seed(0)
    model = InpaintingUNet(UNetConfig(width=16, heads=2, temporal=True))
    clip = small_crops[0]
    spec = pp.MaskSpec()
    mel = pp.log_mel(clip.audio)
    out = generate_crops(model, make_schedule(), PatchProjectionAutoencoder(), clip.frames[:20], mel, spec, steps=3)
    outside = pp.mask_channel(spec, 64) == 0
    assert out.shape == clip.frames[:20].shape and out.dtype == np.uint8
    assert np.array_equal(out[:, outside], clip.frames[:20][:, outside])
    with pytest.raises(ConfigError):
        generate_crops(model, make_schedule(), PatchProjectionAutoencoder(), clip.frames[:20], mel[:, :40], spec, steps=3)
