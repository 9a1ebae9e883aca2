import math

import pytest
import torch

from pivotae.arch import ArchConfig, desk_preset, reference_preset
from pivotae.errors import ConfigError
from pivotae.losses import pivot_distance
from pivotae.metrics import semantic_drift
from pivotae.tokenizer import (
    GaussianPosterior,
    ModelBundle,
    bridge_decode,
    bridge_encode,
    decode,
    encode,
    forward_full,
    noise_inject,
    pivot_encode,
    reconstruct,
    reparameterize,
)
from pivotae.training import build_stage_plan


def test_shapes_through_pipeline(tiny_arch, tiny_images):
    b = ModelBundle(tiny_arch, seed=0)
    g = tiny_arch.grid
    f = encode(b, tiny_images)
    assert f.shape == (6, g, g, tiny_arch.rep_dim)
    post = bridge_encode(b, f)
    assert post.mu.shape == (6, g, g, tiny_arch.latent_dim)
    f_hat = bridge_decode(b, post.mu)
    assert f_hat.shape == f.shape
    x_hat = decode(b, f_hat)
    assert x_hat.shape == tiny_images.shape
    assert x_hat.abs().max() <= 1.0


def test_pivot_matches_encoder_at_init(tiny_arch, tiny_images):
    b = ModelBundle(tiny_arch, seed=1)
    f = encode(b, tiny_images)
    fp = pivot_encode(b, tiny_images)
    assert torch.equal(f, fp)
    assert pivot_distance(f, fp).item() == 0.0
    assert pivot_distance(f, fp, "normalized_l2").item() == 0.0
    assert semantic_drift(f, fp) == pytest.approx(1.0, abs=1e-12)
    assert not fp.requires_grad


def test_pivot_shares_no_storage(tiny_arch):
    b = ModelBundle(tiny_arch)
    before = {k: v.clone() for k, v in b.pivot.state_dict().items()}
    with torch.no_grad():
        for p in b.encoder.parameters():
            p.add_(1.0)
    for k, v in b.pivot.state_dict().items():
        assert torch.equal(v, before[k])
    assert all(not p.requires_grad for p in b.pivot.parameters())


def test_network_inits_do_not_depend_on_latent_dim(tiny_arch):
    a = ModelBundle(tiny_arch, seed=5)
    c = ModelBundle(tiny_arch.with_updates(latent_dim=4), seed=5)
    for group in ("encoder", "decoder", "discriminator"):
        sa, sc = a.group(group).state_dict(), c.group(group).state_dict()
        assert all(torch.equal(sa[k], sc[k]) for k in sa)


def test_seed_changes_init(tiny_arch):
    a, c = ModelBundle(tiny_arch, 0), ModelBundle(tiny_arch, 1)
    assert not torch.equal(a.encoder.patch_embed.weight, c.encoder.patch_embed.weight)


def test_reparameterize_zero_eps_is_mean():
    mu = torch.randn(2, 3, 3, 4)
    post = GaussianPosterior(mu, torch.randn_like(mu))
    assert torch.equal(reparameterize(post, torch.zeros_like(mu)), mu)


def test_reparameterize_moments_monte_carlo():
    n = 200_000
    mu = torch.tensor([0.5, -1.0, 2.0])
    log_var = torch.tensor([0.0, math.log(4.0), math.log(0.25)])
    post = GaussianPosterior(mu.expand(n, 3), log_var.expand(n, 3))
    z = reparameterize(post, torch.randn(n, 3, generator=torch.Generator().manual_seed(0)))
    # standard error of the mean is sigma / sqrt(n) <= 2 / 447; 5 s.e. bound
    assert torch.allclose(z.mean(0), mu, atol=5 * 2 / math.sqrt(n))
    assert torch.allclose(z.var(0), log_var.exp(), rtol=0.02)


def test_posterior_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        GaussianPosterior(torch.zeros(1, 2, 2, 3), torch.zeros(1, 2, 2, 4))


def test_log_var_is_clamped(tiny_arch):
    b = ModelBundle(tiny_arch)
    f = torch.full((1, tiny_arch.grid, tiny_arch.grid, tiny_arch.rep_dim), 1e4)
    post = bridge_encode(b, f)
    assert post.log_var.min() >= tiny_arch.log_var_min
    assert post.log_var.max() <= tiny_arch.log_var_max


def test_noise_inject_identity_and_statistics():
    f = torch.randn(4, 8, 8, 32)
    assert noise_inject(f, 0.0) is f
    out = noise_inject(torch.zeros(64, 8, 8, 32), 0.8, torch.Generator().manual_seed(1))
    assert out.mean().abs() < 0.01
    assert out.std().item() == pytest.approx(0.8, rel=0.01)
    with pytest.raises(ConfigError):
        noise_inject(f, -0.1)


def test_noise_is_reproducible_from_generator():
    f = torch.zeros(2, 3)
    a = noise_inject(f, 1.0, torch.Generator().manual_seed(9))
    b = noise_inject(f, 1.0, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


def test_forward_stage1_bypasses_bridge(tiny_arch, tiny_images):
    b = ModelBundle(tiny_arch)
    out = forward_full(b, tiny_images, torch.Generator().manual_seed(0), build_stage_plan("I"))
    assert out.posterior is None and out.z is None and out.f_hat is None
    # with zero noise the Stage I path is exactly decode(encode(x))
    plan = build_stage_plan("I", noise_sigma=0.0)
    out = forward_full(b, tiny_images, None, plan)
    assert torch.equal(out.x_hat, decode(b, encode(b, tiny_images)))


def test_forward_with_bridge(tiny_arch, tiny_images):
    b = ModelBundle(tiny_arch)
    out = forward_full(b, tiny_images, torch.Generator().manual_seed(0), build_stage_plan("II"))
    assert out.z.shape[-1] == tiny_arch.latent_dim
    assert out.f_hat.shape == out.f.shape


def test_reconstruct_is_deterministic(tiny_arch, tiny_images):
    b = ModelBundle(tiny_arch)
    assert torch.equal(reconstruct(b, tiny_images), reconstruct(b, tiny_images))
    assert torch.equal(reconstruct(b, tiny_images, use_bridge=False), decode(b, encode(b, tiny_images)))


def test_wrong_image_shape_rejected(tiny_arch):
    b = ModelBundle(tiny_arch)
    with pytest.raises(ConfigError):
        encode(b, torch.zeros(1, 3, 16, 16))
    with pytest.raises(ConfigError):
        decode(b, torch.zeros(1, 2, 2, tiny_arch.rep_dim))


def test_load_pretrained_encoder_resyncs_pivot(tiny_arch, tiny_images):
    src = ModelBundle(tiny_arch, seed=11)
    dst = ModelBundle(tiny_arch, seed=12)
    dst.load_pretrained_encoder(src.encoder.state_dict())
    assert torch.equal(encode(dst, tiny_images), pivot_encode(dst, tiny_images))
    assert torch.equal(encode(dst, tiny_images), encode(src, tiny_images))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(latent_dim=192),
        dict(image_size=60),
        dict(encoder_heads=5),
        dict(log_var_min=1.0, log_var_max=0.0),
        dict(rep_dim=0),
    ],
)
def test_arch_validation(kwargs):
    with pytest.raises(ConfigError):
        desk_preset(**kwargs)


def test_presets():
    p = reference_preset()
    assert (p.image_size, p.patch_size, p.rep_dim, p.latent_dim) == (256, 16, 768, 64)
    assert p.grid == 16 and p.num_tokens == 256
    d = desk_preset()
    assert d.latent_dim < d.rep_dim
    assert ArchConfig(**d.to_dict()).digest() == d.digest()
    assert d.with_updates(latent_dim=8).digest() != d.digest()
