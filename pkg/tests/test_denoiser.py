import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dosediff.denoiser import (
    DenoiserConfig, MultiHeadAttention3D, TimeEmbedding, UNet3D, attention, predict_noise, sinusoidal_embedding,
)
from dosediff.model import DoseDenoiser


@pytest.fixture(scope="module")
def unet():
    torch.manual_seed(0)
    return UNet3D(DenoiserConfig.desk()).eval()


def _inputs(cfg, shape, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, cfg.latent_channels, *shape, generator=g)
    temb = torch.randn(batch, cfg.temb_width, generator=g)
    cond = torch.randn(batch, cfg.cond_width, *shape, generator=g)
    return z, temb, cond


def test_config_invariants():
    assert DenoiserConfig().channels == (64, 128, 256, 512)
    assert DenoiserConfig.desk().channels == (16, 32, 64, 128)
    with pytest.raises(ValueError):
        DenoiserConfig(channels=(16, 32, 64))
    with pytest.raises(ValueError):
        DenoiserConfig(channels=(16, 32, 64, 130), heads=4)


def test_sinusoid_at_zero():
    e = sinusoidal_embedding(0, 256)[0]
    assert torch.equal(e[:128], torch.zeros(128, dtype=e.dtype))
    assert torch.equal(e[128:], torch.ones(128, dtype=e.dtype))


def test_sinusoid_injective_on_step_range():
    e = sinusoidal_embedding(torch.arange(1000), 256)
    d = torch.cdist(e, e)
    d.fill_diagonal_(float("inf"))
    assert d.min() > 1e-3


def test_sinusoid_odd_width_and_negative_t():
    with pytest.raises(ValueError):
        sinusoidal_embedding(3, 255)
    with pytest.raises(ValueError):
        sinusoidal_embedding(-1, 256)


def test_time_embedding_deterministic():
    te = TimeEmbedding(256)
    t = torch.tensor([0, 17, 999])
    assert te(t).shape == (3, 256)
    assert torch.equal(te(t), te(t))


@torch.no_grad()
def test_shape_for_clinical_latent(unet):
    z, temb, cond = _inputs(unet.config, (6, 8, 9))
    assert predict_noise(unet, z, temb, cond).shape == z.shape


@settings(max_examples=12, deadline=None)
@given(st.tuples(st.integers(1, 10), st.integers(1, 10), st.integers(1, 10)))
@torch.no_grad()
def test_shape_round_trip_any_grid(shape):
    torch.manual_seed(1)
    net = UNet3D(DenoiserConfig(channels=(8, 8, 8, 8), heads=2, temb_width=16, latent_channels=4, cond_width=4,
                                groups=4)).eval()
    z, temb, cond = _inputs(net.config, shape)
    assert net(z, temb, cond).shape == z.shape


@torch.no_grad()
def test_zero_parameters_give_zero_noise(unet):
    net = UNet3D(unet.config)
    for p in net.parameters():
        p.zero_()
    z, temb, cond = _inputs(net.config, (2, 3, 3))
    out = net(z, temb, cond)
    assert torch.equal(out, torch.zeros_like(out))


@torch.no_grad()
def test_batch_permutation(unet):
    z, temb, cond = _inputs(unet.config, (2, 2, 3), batch=3)
    perm = torch.tensor([2, 0, 1])
    out = unet(z, temb, cond)
    out_p = unet(z[perm], temb[perm], cond[perm])
    torch.testing.assert_close(out_p, out[perm], rtol=1e-5, atol=1e-6)


def test_alignment_errors(unet):
    z, temb, cond = _inputs(unet.config, (2, 2, 2))
    with pytest.raises(ValueError):
        unet(z, temb, cond[..., :1])
    with pytest.raises(ValueError):
        unet(z[:, :5], temb, cond)
    with pytest.raises(ValueError):
        unet(z, temb, cond[:, :3])


@torch.no_grad()
def test_attention_rows_stochastic_at_every_layer(unet):
    mods = unet.attention_modules()
    assert len(mods) >= 2
    for m in mods:
        m.keep_weights = True
    try:
        unet(*_inputs(unet.config, (6, 8, 9)))
        for m in mods:
            rows = m.last_weights.sum(-1)
            torch.testing.assert_close(rows, torch.ones_like(rows), rtol=0, atol=1e-6)
    finally:
        for m in mods:
            m.keep_weights = False


@torch.no_grad()
def test_single_voxel_attention_is_projected_value():
    torch.manual_seed(2)
    m = MultiHeadAttention3D(16, heads=4, groups=4)
    x = torch.randn(2, 16, 1, 1, 1)
    v = m.qkv(m.norm(x))[:, 32:]
    torch.testing.assert_close(m(x), x + m.proj(v), rtol=1e-6, atol=1e-6)
    assert m(torch.randn(1, 16, 3, 4, 5)).shape == (1, 16, 3, 4, 5)


def test_attention_divisibility():
    with pytest.raises(ValueError):
        MultiHeadAttention3D(10, heads=4)
    with pytest.raises(ValueError):
        attention(torch.zeros(1, 2, 10), torch.zeros(1, 2, 10), torch.zeros(1, 2, 10), 4)


def test_gradient_matches_finite_differences():
    torch.manual_seed(3)
    model = DoseDenoiser.desk().double()
    g = torch.Generator().manual_seed(3)
    z = torch.randn(1, 32, 2, 2, 2, generator=g, dtype=torch.float64)
    masks = (torch.rand(1, 8, 32, 32, 32, generator=g) > 0.7).double()
    ctx = torch.tensor([[1.0, 0, 1, 0, 0.6]], dtype=torch.float64)
    t = torch.tensor([37])

    def loss():
        return model(z, t, masks, ctx).pow(2).sum()

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = torch.Generator().manual_seed(4)
    checked = 0
    while checked < 20:
        p = params[int(torch.randint(len(params), (1,), generator=rng))]
        idx = int(torch.randint(p.numel(), (1,), generator=rng))
        analytic = p.grad.reshape(-1)[idx].item()
        if abs(analytic) < 1e-6:
            continue
        flat = p.data.reshape(-1)
        h = 1e-6
        with torch.no_grad():
            flat[idx] += h
            up = loss().item()
            flat[idx] -= 2 * h
            down = loss().item()
            flat[idx] += h
        numeric = (up - down) / (2 * h)
        assert abs(numeric - analytic) <= 1e-2 * abs(analytic), (numeric, analytic)
        checked += 1
