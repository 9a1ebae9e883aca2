"""Reconstruction and semantic-preservation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    rec_l1: float
    perc_dist: float
    semantic_drift: float
    fd_proxy: Optional[float] = None
    probe_top1: Optional[float] = None

    def as_row(self) -> dict:
        return asdict(self)


def psnr(x, x_hat, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB over the whole batch; capped at 99 dB."""
    mse = float(((torch.as_tensor(x, dtype=torch.float64) - torch.as_tensor(x_hat, dtype=torch.float64)) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x, x_hat, peak: float = 2.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over batch, channels and every fully-contained window."""
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(x_hat, dtype=torch.float64)
    if x.shape != y.shape or x.dim() != 4:
        raise ConfigError(f"ssim expects two equal (B, C, H, W) tensors, got {tuple(x.shape)}, {tuple(y.shape)}")
    if min(x.shape[-2:]) < window:
        raise ConfigError(f"images smaller than the {window}x{window} SSIM window")
    C = x.shape[1]
    w = gaussian_window(window, sigma).expand(C, 1, window, window)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def filt(t):
        return F.conv2d(t, w, groups=C)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_from_stats(mu1, cov1, mu2, cov2) -> float:
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    s1 = _sqrt_psd(cov1)
    cross = np.linalg.eigvalsh(s1 @ cov2 @ s1)
    tr_sqrt = np.sqrt(np.clip(cross, 0, None)).sum()
    value = float(((mu1 - mu2) ** 2).sum() + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt)
    return max(value, 0.0)


def fd_proxy(real_feats, fake_feats) -> float:
    """Fréchet distance between Gaussian fits of two ``(n, d)`` feature sets."""
    a = np.asarray(real_feats, dtype=np.float64)
    b = np.asarray(fake_feats, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ConfigError("feature sets have different widths")
    d = a.shape[1]
    if min(len(a), len(b)) < d + 1:
        raise ConfigError(f"fd_proxy needs at least {d + 1} samples per side for {d}-dim features")
    return frechet_from_stats(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def semantic_drift(f, f_pivot) -> float:
    """Mean cosine similarity between encoder and pivot features per grid position."""
    return float(F.cosine_similarity(f.detach().double(), f_pivot.detach().double(), dim=-1, eps=1e-12).mean())


def _pool(feats):
    feats = torch.as_tensor(feats)
    if feats.dim() == 4:
        feats = feats.mean(dim=(1, 2))
    return feats.detach().double().numpy()


def linear_probe(features, labels, heldout_features, heldout_labels, max_iter: int = 500) -> float:
    """Held-out top-1 of a multinomial logistic regression on pooled features.

    Grid features ``(B, h, w, D)`` are mean-pooled over positions first.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    xtr, xte = _pool(features), _pool(heldout_features)
    ytr = np.asarray(labels)
    yte = np.asarray(heldout_labels)
    if len(np.unique(ytr)) < 2:
        raise ConfigError("linear probe needs at least two classes in the training labels")
    scaler = StandardScaler().fit(xtr)
    clf = LogisticRegression(max_iter=max_iter)
    clf.fit(scaler.transform(xtr), ytr)
    return float((clf.predict(scaler.transform(xte)) == yte).mean())


@torch.no_grad()
def evaluate_reconstruction(bundle, images, use_bridge: bool, feature_net, labels=None,
                            probe_split=None, chunk: int = 64) -> MetricReport:
    """Reconstruction and semantic metrics of ``bundle`` on ``images``.

    ``probe_split`` is an optional ``(images, labels)`` pair; when given with
    ``labels``, a linear probe is fit on this split's encoder features and
    scored on the other split.
    """
    from .losses import perceptual_loss
    from .tokenizer import encode, pivot_encode, reconstruct

    xs, xhs, fs, fps = [], [], [], []
    for i in range(0, images.shape[0], chunk):
        x = images[i : i + chunk]
        xs.append(x)
        xhs.append(reconstruct(bundle, x, use_bridge=use_bridge))
        fs.append(encode(bundle, x))
        fps.append(pivot_encode(bundle, x))
    x, x_hat, f, fp = (torch.cat(t) for t in (xs, xhs, fs, fps))
    real = feature_net.pooled(x).double().numpy()
    fake = feature_net.pooled(x_hat).double().numpy()
    try:
        fd = fd_proxy(real, fake)
    except ConfigError:
        log.warning("too few samples (%d) for the Fréchet proxy; leaving it empty", len(real))
        fd = None
    top1 = None
    if labels is not None and probe_split is not None and probe_split[1] is not None and len(probe_split[0]):
        probe_feats = torch.cat([encode(bundle, probe_split[0][i : i + chunk])
                                 for i in range(0, probe_split[0].shape[0], chunk)])
        top1 = linear_probe(probe_feats, probe_split[1], f, labels)
    return MetricReport(
        psnr=psnr(x, x_hat),
        ssim=ssim(x, x_hat),
        rec_l1=float((x - x_hat).abs().mean()),
        perc_dist=float(perceptual_loss(x, x_hat, feature_net)),
        semantic_drift=semantic_drift(f, fp),
        fd_proxy=fd,
        probe_top1=top1,
    )
