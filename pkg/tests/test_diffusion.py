from __future__ import annotations

import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model
from vlogkit.backends import Embedding
from vlogkit.diffusion import (
    ConditioningBundle,
    ModeSelector,
    PatchAutoencoder,
    assemble_denoiser_input,
    build_masked_context,
    cfg_combine,
    load_checkpoint,
    make_conditioning,
    make_schedule,
    pmf,
    predict_noise,
    q_sample,
    sample_clip,
    sample_k,
    save_checkpoint,
    split_denoiser_input,
)
from vlogkit.diffusion.model import read_metadata
from vlogkit.diffusion.network import temporal_parameters
from vlogkit.errors import ConfigError, DomainError, ShapeError
from vlogkit.toydata import render_clip


def _emb(rng, tokens=3, dim=16):
    return Embedding(rng.standard_normal((tokens, dim)))


def _randomize(module, rng, scale=0.2):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.as_tensor(rng.standard_normal(p.shape) * scale, dtype=p.dtype))


# --------------------------------------------------------------------------- schedule


def test_schedule_invariants():
    s = make_schedule(1000, "scaled_linear")
    assert s.alphas_cumprod[0] > 0.99
    assert np.all(np.diff(s.betas) > 0) and np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alphas_cumprod) < 0)
    np.testing.assert_allclose(s.alphas_cumprod, np.cumprod(1 - s.betas), rtol=1e-12)
    two = make_schedule(2, "linear")
    assert len(two.betas) == 2 and two.alphas_cumprod[1] < two.alphas_cumprod[0]
    with pytest.raises(DomainError):
        make_schedule(1)


def test_q_sample():
    s = make_schedule(1000)
    x0 = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    np.testing.assert_allclose(q_sample(x0, 0, torch.randn_like(x0), s), x0, atol=0.1)
    a = s.alphas_cumprod[500]
    assert torch.equal(q_sample(x0, 500, torch.zeros_like(x0), s), np.sqrt(a) * x0)
    s.alphas_cumprod[7] = 0.25
    out = q_sample(torch.ones(1, 4, 2, 2, dtype=torch.float64), 7, torch.ones(1, 4, 2, 2, dtype=torch.float64), s)
    np.testing.assert_allclose(out, 0.5 + np.sqrt(0.75), rtol=1e-12)
    with pytest.raises(ShapeError):
        q_sample(x0, 3, torch.zeros(1), s)


# --------------------------------------------------------------------------- modes


def test_pmf_examples():
    p = pmf(ModeSelector(0.6, 6))
    np.testing.assert_allclose(p, [0.4, 0.24, 0.144, 0.0864, 0.05184, 0.031104, 0.046656], atol=1e-15)
    assert pmf(ModeSelector(0.6, 0)).tolist() == [1.0]


@given(st.floats(0.01, 0.99), st.integers(0, 16))
def test_pmf_normalised(alpha, m):
    assert abs(pmf(ModeSelector(alpha, m)).sum() - 1) < 1e-12


def test_sample_k():
    sel = ModeSelector(0.6, 6)
    draws = sample_k(sel, np.random.default_rng(0), 100_000)
    assert abs(np.mean(draws == 0) - 0.4) < 0.01
    assert np.array_equal(draws[:50], sample_k(sel, np.random.default_rng(0), 100_000)[:50])
    assert set(sample_k(ModeSelector(0.6, 0), np.random.default_rng(1), 100).tolist()) == {0}


def test_masked_context_examples():
    x = torch.randn(16, 4, 2, 2)
    c0 = build_masked_context(x, 0)
    assert not c0.x_k.any() and not c0.mask.any()
    cf = build_masked_context(x, 16)
    assert torch.equal(cf.x_k, x) and cf.mask.all()
    c3 = build_masked_context(x, 3)
    assert torch.equal(c3.x_k[:3], x[:3]) and not c3.x_k[3:].any()
    assert torch.equal(c3.x_k * c3.mask_map, c3.x_k)
    with pytest.raises(DomainError):
        build_masked_context(x, 17)


def test_denoiser_input_layout_and_round_trip():
    x_noise, x = torch.randn(5, 4, 3, 3), torch.randn(5, 4, 3, 3)
    ctx = build_masked_context(x, 2)
    x_in = assemble_denoiser_input(x_noise, ctx)
    assert x_in.shape == (5, 9, 3, 3)
    n, k, m = split_denoiser_input(x_in)
    assert torch.equal(n, x_noise) and torch.equal(k, ctx.x_k) and torch.equal(m, ctx.mask_map.expand_as(m))
    assert not assemble_denoiser_input(x_noise, build_masked_context(x, 0))[:, 4:].any()
    with pytest.raises(ShapeError):
        assemble_denoiser_input(torch.randn(5, 4, 2, 2), ctx)


# --------------------------------------------------------------------------- autoencoder


def test_identity_codec_is_bit_exact():
    ae = PatchAutoencoder(1, identity=True)
    x = torch.rand(3, 3, 8, 8)
    z = ae.encode(x)
    assert z.shape[1] == 4
    assert torch.equal(ae.decode(z), x)


def test_fitted_codec_reconstructs_constant_colour_clip():
    rng = np.random.default_rng(0)
    train = np.concatenate([render_clip(c, "circle", "right", 8, 64, background=tuple(rng.uniform(0, 0.5, 3)))
                            for c in ("red", "blue", "yellow", "green")])
    ae = PatchAutoencoder(8).fit(train)
    flat = np.ones((4, 3, 64, 64), dtype=np.float32) * np.array([0.2, 0.6, 0.4], dtype=np.float32)[:, None, None]
    err = np.abs(ae.decode(ae.encode(flat)).numpy() - flat).max()
    assert err < 0.1
    with pytest.raises(ShapeError):
        ae.encode(np.zeros((1, 3, 60, 60), dtype=np.float32))


# --------------------------------------------------------------------------- network


def _cond(rng, b=1, actor=True, beta=1.0):
    texts = [_emb(rng) for _ in range(b)]
    actors = [_emb(rng, 2) for _ in range(b)] if actor else None
    return make_conditioning(texts, actors, beta)


def test_zero_init_extra_channels():
    model = tiny_model(frame_size=8, factor=2)
    rng = np.random.default_rng(0)
    x_in = torch.randn(1, 4, 9, 4, 4)
    cond = _cond(rng)
    base = predict_noise(model.denoiser, x_in, torch.tensor([500]), cond)
    x2 = x_in.clone()
    x2[:, :, 4:] = torch.randn_like(x2[:, :, 4:])
    assert torch.equal(base, predict_noise(model.denoiser, x2, torch.tensor([500]), cond))
    x2.requires_grad_(True)
    predict_noise(model.denoiser, x2, torch.tensor([500]), cond).sum().backward()
    assert not x2.grad[:, :, 4:].any()


def test_predict_noise_shape_and_purity():
    model = tiny_model()
    rng = np.random.default_rng(0)
    _randomize(model.denoiser, rng)
    x_in, cond = torch.randn(4, 9, 4, 4), _cond(rng)
    a = predict_noise(model.denoiser, x_in, 10, cond)
    assert a.shape == (4, 4, 4, 4)
    assert torch.equal(a, predict_noise(model.denoiser, x_in, 10, cond))
    with pytest.raises(ShapeError):
        predict_noise(model.denoiser, torch.randn(4, 8, 4, 4), 10, cond)


def _block_inputs(rng, f=3, w=8):
    model = tiny_model(width=w)
    block = model.denoiser.down[0]
    x = torch.randn(1, f, w, 4, 4)
    temb = torch.randn(1, 4 * w)
    return model, block, x, temb


def test_beta_zero_equals_actor_free_block():
    rng = np.random.default_rng(0)
    model, block, x, temb = _block_inputs(rng)
    _randomize(block, rng)
    stripped = copy.deepcopy(block)
    del stripped.spatial_actor
    with_actor = block(x, temb, _cond(np.random.default_rng(1), beta=0.0))
    without = stripped(x, temb, _cond(np.random.default_rng(1), actor=False), use_actor=False)
    assert torch.equal(with_actor, without)


def test_fresh_block_equals_conv_path():
    rng = np.random.default_rng(0)
    model, block, x, temb = _block_inputs(rng)
    out = block(x, temb, _cond(rng))
    conv = block.res(x.reshape(3, 8, 4, 4), temb.repeat_interleave(3, dim=0)).reshape(1, 3, 8, 4, 4)
    assert torch.equal(out, conv)


def test_single_frame_ignores_temporal_parameters():
    rng = np.random.default_rng(0)
    model, block, x, temb = _block_inputs(rng, f=1)
    _randomize(block, rng)
    cond = _cond(np.random.default_rng(2))
    before = block(x, temb, cond)
    with torch.no_grad():
        for name, p in block.named_parameters():
            if name.startswith("temporal_"):
                p.add_(1.0)
    assert torch.equal(before, block(x, temb, cond))


def test_beta_linearity():
    rng = np.random.default_rng(0)
    model, block, x, temb = _block_inputs(rng)
    block = block.double()
    _randomize(block, rng)
    x, temb = x.double(), temb.double()
    texts, actors = [_emb(rng)], [_emb(rng, 2)]

    def z(beta):
        c = make_conditioning(texts, actors if beta else None, beta, torch.float64)
        return block.spatial(x, temb, c)[0]

    torch.testing.assert_close(z(0.7) + z(1.6) - z(0), z(2.3), rtol=1e-10, atol=1e-12)


def test_frame_limit():
    model = tiny_model(max_frames=4)
    with pytest.raises(ShapeError):
        predict_noise(model.denoiser, torch.randn(5, 9, 4, 4), 1, _cond(np.random.default_rng(0)))


# --------------------------------------------------------------------------- sampler


def test_cfg_combine_examples():
    e = torch.randn(3, 4)
    c = torch.randn(3, 4)
    assert torch.equal(cfg_combine(e, c, 1.0), c)
    assert torch.equal(cfg_combine(c, c, 5.0), c)
    assert torch.equal(cfg_combine(torch.zeros(2), torch.ones(2), 2.0), torch.full((2,), 2.0))
    with pytest.raises(ShapeError):
        cfg_combine(e, torch.zeros(2), 2.0)


class _Oracle(torch.nn.Module):
    """Returns the exact noise for a known clean clip, so sampling must recover it."""

    def __init__(self, x0, schedule):
        super().__init__()
        self.x0 = x0
        self.abar = torch.as_tensor(schedule.alphas_cumprod)
        self.p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x_in, t, cond):
        a = self.abar[t.long()].reshape(-1, 1, 1, 1, 1)
        return (x_in[:, :, :4] - a.sqrt() * self.x0) / (1 - a).sqrt()

    def to_noise(self, raw, x_t, t):
        return raw


@pytest.mark.parametrize("kind", ["ddpm", "ddim"])
def test_sampler_recovers_clean_clip_with_oracle(kind):
    s = make_schedule(1000)
    x0 = torch.randn(4, 4, 2, 2, dtype=torch.float64)
    cond = ConditioningBundle(_emb(np.random.default_rng(0)), guidance_scale=3.0)
    out = sample_clip(_Oracle(x0, s), s, cond, build_masked_context(torch.zeros_like(x0), 0), 20,
                      np.random.default_rng(0), kind)
    torch.testing.assert_close(out, x0, atol=1e-6, rtol=0)


def test_sampler_determinism_and_replacement():
    model = tiny_model()
    rng = np.random.default_rng(0)
    _randomize(model.denoiser, rng, 0.05)
    x = torch.randn(4, 4, 4, 4)
    cond = ConditioningBundle(_emb(rng), _emb(rng, 2), guidance_scale=2.0)
    a = sample_clip(model.denoiser, model.schedule, cond, build_masked_context(x, 2), 5, np.random.default_rng(3))
    b = sample_clip(model.denoiser, model.schedule, cond, build_masked_context(x, 2), 5, np.random.default_rng(3))
    assert torch.equal(a, b)
    assert torch.equal(a[:2], x[:2])
    full = sample_clip(model.denoiser, model.schedule, cond, build_masked_context(x, 4), 3, np.random.default_rng(0))
    assert torch.equal(full, x)
    with pytest.raises(DomainError):
        sample_clip(model.denoiser, model.schedule, cond, build_masked_context(x, 0), 1001, rng)


def test_conditioning_bundle_validation():
    with pytest.raises(DomainError):
        ConditioningBundle(Embedding.null(4), beta=-1)
    with pytest.raises(DomainError):
        ConditioningBundle(Embedding.null(4), guidance_scale=0.5)


# --------------------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = tiny_model()
    _randomize(model.denoiser, np.random.default_rng(0))
    opt = torch.optim.AdamW(model.denoiser.parameters(), lr=1e-3)
    model.denoiser(torch.randn(1, 4, 9, 4, 4), torch.tensor([3]), _cond(np.random.default_rng(0))).sum().backward()
    opt.step()
    p1 = save_checkpoint(tmp_path / "a.safetensors", model, 7, opt, {"note": "x"})
    ck = load_checkpoint(p1)
    opt2 = torch.optim.AdamW(ck.model.denoiser.parameters(), lr=1e-3)
    opt2.load_state_dict(ck.optim_state)
    p2 = save_checkpoint(tmp_path / "b.safetensors", ck.model, ck.step, opt2, ck.extra)
    assert p1.read_bytes() == p2.read_bytes()
    meta = read_metadata(p1)
    assert meta["version"] == "1" and ck.step == 7 and ck.extra == {"note": "x"}
    assert {"model_config", "schedule", "selector"} <= set(meta)


def test_missing_or_foreign_checkpoint(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "nope.safetensors")
    from safetensors.torch import save_file

    save_file({"x": torch.zeros(1)}, str(tmp_path / "f.safetensors"))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "f.safetensors")


def test_temporal_parameters_found():
    names = [n for n, _ in temporal_parameters(tiny_model().denoiser)]
    assert names and all(".temporal_" in n for n in names)
