import math

import numpy as np
import pytest
import torch

from oracles import naive_ssim
from pivotae import metrics as M
from pivotae.errors import ConfigError
from pivotae.losses import PerceptualNet
from pivotae.tokenizer import ModelBundle


def test_psnr_spot_values():
    x = torch.zeros(1, 1, 4, 4)
    assert M.psnr(x, x + 0.5, peak=1.0) == pytest.approx(10 * math.log10(1 / 0.25), abs=1e-12)
    assert M.psnr(x, x + 0.5, peak=1.0) == pytest.approx(6.0206, abs=1e-4)
    assert M.psnr(x, x + 2.0, peak=2.0) == pytest.approx(0.0, abs=1e-12)
    assert M.psnr(x, x) == 99.0


def test_ssim_matches_naive_sliding_window():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 2, 16, 14, generator=g, dtype=torch.float64) * 2 - 1
    y = (x + 0.3 * torch.randn(x.shape, generator=g, dtype=torch.float64)).clamp(-1, 1)
    assert M.ssim(x, y) == pytest.approx(naive_ssim(x.numpy(), y.numpy()), abs=1e-6)


def test_ssim_identity_and_bounds():
    x = torch.rand(1, 3, 12, 12) * 2 - 1
    assert M.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert M.ssim(x, -x) < 1.0
    with pytest.raises(ConfigError):
        M.ssim(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8))


def test_fd_proxy_one_dimensional_closed_form():
    # Exact unit variance and means 0 and 3: FD = 3^2 + 1 + 1 - 2 = 9.
    a = np.array([-1.0, 1.0])
    a = a / a.std(ddof=1)
    assert M.fd_proxy(a, a + 3.0) == pytest.approx(9.0, abs=1e-6)
    assert M.frechet_from_stats(0.0, 1.0, 3.0, 1.0) == pytest.approx(9.0, abs=1e-12)


def test_frechet_multivariate_gaussian_oracle():
    cov1 = np.diag([1.0, 4.0])
    cov2 = np.diag([9.0, 1.0])
    # For commuting covariances tr sqrt(C1 C2) = sum sqrt(eig1 * eig2).
    expected = 1.0 + (1 + 4 + 9 + 1) - 2 * (3.0 + 2.0)
    assert M.frechet_from_stats([0, 0], cov1, [1, 0], cov2) == pytest.approx(expected, abs=1e-10)


def test_fd_proxy_needs_enough_samples():
    with pytest.raises(ConfigError):
        M.fd_proxy(np.zeros((3, 4)), np.zeros((3, 4)))


def test_semantic_drift_cosine():
    f = torch.tensor([[[[1.0, 0.0], [0.0, 2.0]]]])
    fp = torch.tensor([[[[1.0, 0.0], [2.0, 0.0]]]])
    assert M.semantic_drift(f, fp) == pytest.approx(0.5)


def test_linear_probe_separable_and_chance():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 50)
    centers = rng.normal(size=(4, 8)) * 5
    feats = centers[y] + rng.normal(size=(200, 8))
    held = centers[y] + rng.normal(size=(200, 8))
    assert M.linear_probe(feats, y, held, y) > 0.95
    noise = rng.normal(size=(200, 8))
    held_noise = rng.normal(size=(200, 8))
    assert abs(M.linear_probe(noise, y, held_noise, y) - 0.25) < 0.12


def test_linear_probe_pools_grids():
    y = np.array([0, 1] * 10)
    grid = torch.zeros(20, 2, 2, 3)
    grid[y == 1] += 1.0
    assert M.linear_probe(grid, y, grid, y) == 1.0
    with pytest.raises(ConfigError):
        M.linear_probe(grid, np.zeros(20), grid, y)


def test_evaluate_reconstruction_report(tiny_arch):
    b = ModelBundle(tiny_arch)
    x = torch.rand(20, 3, 32, 32) * 2 - 1
    labels = torch.tensor([0, 1] * 10)
    rep = M.evaluate_reconstruction(b, x, True, PerceptualNet(), labels, (x, labels))
    assert rep.semantic_drift == pytest.approx(1.0)
    assert rep.fd_proxy is not None and rep.fd_proxy >= 0
    assert 0 <= rep.probe_top1 <= 1
    assert set(rep.as_row()) == {"psnr", "ssim", "rec_l1", "perc_dist", "semantic_drift", "fd_proxy", "probe_top1"}
