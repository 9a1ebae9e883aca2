import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import analytic_grad, central_fd_grad, mc_kl, rel_err
from pivotae import losses as L
from pivotae.errors import ConfigError, NumericError
from pivotae.tokenizer import GaussianPosterior


def test_kl_closed_form_spot_values():
    zero = GaussianPosterior(torch.zeros(1, 1, 1, 1), torch.zeros(1, 1, 1, 1))
    assert L.kl_loss(zero).item() == 0.0
    unit_mean = GaussianPosterior(torch.ones(1, 1, 1, 1), torch.zeros(1, 1, 1, 1))
    assert L.kl_loss(unit_mean).item() == pytest.approx(0.5, abs=1e-6)
    unit_logvar = GaussianPosterior(torch.zeros(1, 1, 1, 1), torch.ones(1, 1, 1, 1))
    assert L.kl_loss(unit_logvar).item() == pytest.approx((math.e - 2) / 2, abs=1e-6)


def test_kl_sums_channels_and_averages_positions():
    mu = torch.ones(2, 3, 3, 5)
    post = GaussianPosterior(mu, torch.zeros_like(mu))
    assert L.kl_loss(post).item() == pytest.approx(5 * 0.5)


def test_kl_matches_monte_carlo_small():
    rng = np.random.default_rng(0)
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        mu = torch.randn(1, 1, 1, 3, generator=g, dtype=torch.float64)
        lv = torch.randn(1, 1, 1, 3, generator=g, dtype=torch.float64) * 0.5
        exact = L.kl_loss(GaussianPosterior(mu, lv)).item()
        assert exact == pytest.approx(mc_kl(mu.flatten(), lv.flatten(), 200_000, rng), abs=3e-2)


def test_kl_nonfinite_raises():
    post = GaussianPosterior(torch.full((1, 1, 1, 1), float("nan")), torch.zeros(1, 1, 1, 1))
    with pytest.raises(NumericError):
        L.kl_loss(post)


@pytest.mark.parametrize(
    "name,fn",
    [
        ("rec", lambda a, b: L.rec_loss(a, b)),
        ("piv_raw", lambda a, b: L.pivot_distance(a, b, "raw_l2")),
        ("piv_norm", lambda a, b: L.pivot_distance(a, b, "normalized_l2")),
        ("feat", lambda a, b: L.feature_consistency_loss(b, a)),
    ],
)
def test_gradients_match_finite_differences(name, fn):
    g = torch.Generator().manual_seed(1)
    a = torch.randn(2, 2, 2, 4, generator=g, dtype=torch.float64)
    b = torch.randn(2, 2, 2, 4, generator=g, dtype=torch.float64)
    f = lambda t: fn(t, b)
    assert rel_err(analytic_grad(f, a), central_fd_grad(f, a)) < 1e-4


def test_kl_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(2)
    mu = torch.randn(1, 2, 2, 4, generator=g, dtype=torch.float64)
    lv = torch.randn(1, 2, 2, 4, generator=g, dtype=torch.float64)
    f_mu = lambda t: L.kl_loss(GaussianPosterior(t, lv))
    f_lv = lambda t: L.kl_loss(GaussianPosterior(mu, t))
    assert rel_err(analytic_grad(f_mu, mu), central_fd_grad(f_mu, mu)) < 1e-4
    assert rel_err(analytic_grad(f_lv, lv), central_fd_grad(f_lv, lv)) < 1e-4


def test_feature_consistency_does_not_move_encoder():
    f = torch.randn(1, 2, 2, 3, requires_grad=True)
    f_hat = torch.randn(1, 2, 2, 3, requires_grad=True)
    L.feature_consistency_loss(f, f_hat).backward()
    assert f.grad is None
    assert f_hat.grad is not None


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.01, 100.0), seed=st.integers(0, 2**16))
def test_normalized_pivot_is_scale_invariant(scale, seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(2, 2, 2, 6, generator=g, dtype=torch.float64)
    fp = torch.randn(2, 2, 2, 6, generator=g, dtype=torch.float64)
    base = L.pivot_distance(f, fp, "normalized_l2")
    assert L.pivot_distance(scale * f, fp, "normalized_l2").item() == pytest.approx(base.item(), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_pivot_distance_nonnegative_and_zero_on_identity(seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(1, 2, 2, 5, generator=g)
    fp = torch.randn(1, 2, 2, 5, generator=g)
    for v in L.PIVOT_VARIANTS:
        assert L.pivot_distance(f, fp, v) >= 0
        assert L.pivot_distance(f, f.clone(), v).item() == 0.0


def test_pivot_distance_rejects_bad_input():
    with pytest.raises(ConfigError):
        L.pivot_distance(torch.zeros(1, 2), torch.zeros(1, 3))
    with pytest.raises(ConfigError):
        L.pivot_distance(torch.zeros(1, 2), torch.zeros(1, 2), "cosine")


def _tiny_problem(seed=0):
    g = torch.Generator().manual_seed(seed)
    enc = torch.nn.Linear(6, 4).double()
    dec = torch.nn.Linear(4, 6).double()
    with torch.no_grad():
        for p in list(enc.parameters()) + list(dec.parameters()):
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.5)
    x = torch.randn(8, 6, generator=g, dtype=torch.float64)
    f_p = torch.randn(8, 4, generator=g, dtype=torch.float64)
    f = enc(x)
    return enc, L.rec_loss(x, dec(f)), L.pivot_distance(f, f_p)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_adaptive_pivot_weight_scales_with_reconstruction(c):
    bounds = L.ClipBounds(0.0, 1e12, 1e-6)
    enc, rec, piv = _tiny_problem()
    params = list(enc.parameters())
    base = L.adaptive_pivot_weight(L.GradNormPair(L.grad_norm(rec, params), L.grad_norm(piv, params)), bounds)
    scaled = L.adaptive_pivot_weight(L.GradNormPair(L.grad_norm(c * rec, params), L.grad_norm(piv, params)), bounds)
    assert scaled == pytest.approx(c * base, rel=1e-5)


def test_adaptive_pivot_weight_clips():
    b = L.ClipBounds(0.1, 5.0, 0.0)
    assert L.adaptive_pivot_weight(L.GradNormPair(1e6, 1.0), b) == 5.0
    assert L.adaptive_pivot_weight(L.GradNormPair(0.0, 1.0), b) == 0.1
    assert L.adaptive_pivot_weight(L.GradNormPair(3.0, 0.0), b) == 5.0
    assert L.adaptive_pivot_weight(L.GradNormPair(2.0, 1.0), b) == 2.0


def test_gan_weight_includes_base_weight():
    assert L.adaptive_gan_weight(2.0, 1.0, 0.75, L.ClipBounds(0, 1e4, 0.0)) == pytest.approx(1.5)


def test_grad_norm_keeps_graph():
    w = torch.tensor([3.0, 4.0], requires_grad=True)
    loss = (w**2).sum() / 2
    assert L.grad_norm(loss, [w]) == pytest.approx(5.0)
    loss.backward()
    assert torch.equal(w.grad, w.detach())


def test_invalid_weights_and_bounds():
    with pytest.raises(ConfigError):
        L.LossWeights(w_piv=-1.0)
    with pytest.raises(ConfigError):
        L.LossWeights(w_kl=float("nan"))
    with pytest.raises(ConfigError):
        L.ClipBounds(2.0, 1.0)
    with pytest.raises(NumericError):
        L.GradNormPair(float("inf"), 1.0)
    with pytest.raises(ConfigError):
        L.pivot_loss(torch.zeros(1), torch.zeros(1), -1.0)


def test_stage_default_weights():
    w = L.LossWeights.for_stage("II")
    assert (w.w_feat, w.w_kl, w.w_rec) == (1.0, 0.001, 0.05)
    assert L.LossWeights.for_stage("I").w_gan == 0.75


def test_hinge_discriminator_loss_values():
    class Const(torch.nn.Module):
        def forward(self, x):
            return x.mean(dim=(1, 2, 3))

    d = Const()
    real = torch.full((2, 1, 2, 2), 2.0)
    fake = torch.full((2, 1, 2, 2), -2.0)
    assert L.gan_discriminator_loss(d, real, fake).item() == 0.0
    assert L.gan_discriminator_loss(d, fake, real).item() == pytest.approx(6.0)
    assert L.gan_generator_loss(d, fake).item() == pytest.approx(2.0)


def test_discriminator_loss_detaches_fake():
    d = torch.nn.Conv2d(3, 1, 1)
    x_hat = torch.randn(1, 3, 4, 4, requires_grad=True)
    L.gan_discriminator_loss(d, torch.randn(1, 3, 4, 4), x_hat).backward()
    assert x_hat.grad is None


def test_stage_totals_are_weighted_sums():
    t = {k: torch.tensor(v) for k, v in dict(rec=0.5, piv=0.2, gan=0.3, perc=0.1, feat=0.4, kl=2.0).items()}
    w1 = L.LossWeights.for_stage("I")
    total, rep = L.stage1_total(t, w1, lambda_piv=3.0, lambda_gan=0.6)
    assert total.item() == pytest.approx(0.5 + 3.0 * 0.2 + 0.6 * 0.3 + 0.1)
    assert rep.weighted_sum() == pytest.approx(rep.total)
    total, _ = L.stage2_total(t, L.LossWeights.for_stage("II"))
    assert total.item() == pytest.approx(0.4 + 0.001 * 2.0 + 0.05 * 0.5)
    total, _ = L.stage3_total(t, L.LossWeights.for_stage("III"), lambda_gan=0.5)
    assert total.item() == pytest.approx(0.5 + 0.5 * 0.3 + 0.1)
    total, _ = L.single_total(t, L.LossWeights.for_stage("single"), 1.0, 0.5)
    assert total.item() == pytest.approx(0.5 + 0.2 + 0.15 + 0.1 + 0.4 + 0.002)


def test_zero_coefficient_terms_stay_out_of_graph():
    a = torch.tensor(1.0, requires_grad=True)
    total, rep = L.compose_total("I", {"rec": a * 2, "piv": a * 5}, {"rec": 1.0, "piv": 0.0})
    total.backward()
    assert a.grad.item() == 2.0
    assert rep.terms["piv"] == 5.0


def test_nonfinite_term_names_stage_and_step():
    with pytest.raises(NumericError, match="term=piv"):
        L.compose_total("I", {"rec": torch.tensor(1.0), "piv": torch.tensor(float("inf"))},
                        {"rec": 1.0, "piv": 1.0}, step=7)


def test_perceptual_net_is_frozen_and_deterministic():
    a, b = L.PerceptualNet(), L.PerceptualNet()
    x = torch.randn(2, 3, 16, 16)
    assert all(not p.requires_grad for p in a.parameters())
    assert torch.equal(a.pooled(x), b.pooled(x))
    assert L.perceptual_loss(x, x, a).item() == 0.0
    assert L.perceptual_loss(x, x + 0.1, a).item() > 0


def test_grad_norms_matches_separate_calls():
    w1 = torch.tensor([1.0, 2.0], requires_grad=True)
    w2 = torch.tensor([3.0], requires_grad=True)
    loss = (w1**2).sum() + 5 * w2.sum()
    assert L.grad_norms(loss, [[w1], [w2], [w1, w2]]) == pytest.approx(
        [L.grad_norm(loss, [w1]), L.grad_norm(loss, [w2]), L.grad_norm(loss, [w1, w2])]
    )


def test_rec_loss_constant_offset():
    x = torch.rand(2, 3, 8, 8) * 2 - 1
    assert L.rec_loss(x, x + 0.5).item() == pytest.approx(0.5, abs=1e-6)


def test_rec_loss_matches_elementwise_loop():
    g = torch.Generator().manual_seed(9)
    x = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    y = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    xs, ys = x.flatten().tolist(), y.flatten().tolist()
    brute = sum(abs(a - b) for a, b in zip(xs, ys)) / len(xs)
    assert abs(L.rec_loss(x, y).item() - brute) < 1e-7
