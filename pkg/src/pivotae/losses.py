"""Loss terms, adaptive weights, and per-stage total composition.

Every reduction is a mean over all tensor elements, so loss magnitudes do not
depend on batch size or feature width.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError
from .seeding import derive_seed
from .tokenizer import GaussianPosterior

PIVOT_VARIANTS = ("raw_l2", "normalized_l2")


@dataclass(frozen=True)
class LossWeights:
    w_piv: float = 0.0
    w_gan: float = 0.0
    w_perc: float = 0.0
    w_feat: float = 0.0
    w_kl: float = 0.0
    w_rec: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"loss weight {name} must be a finite nonnegative number, got {value}")

    @classmethod
    def for_stage(cls, stage_id: str) -> "LossWeights":
        if stage_id == "I":
            return cls(w_piv=1.0, w_gan=0.75, w_perc=1.0)
        if stage_id == "II":
            return cls(w_feat=1.0, w_kl=0.001, w_rec=0.05)
        if stage_id == "III":
            return cls(w_gan=0.75, w_perc=1.0)
        if stage_id == "single":
            return cls(w_piv=1.0, w_gan=0.75, w_perc=1.0, w_feat=1.0, w_kl=0.001, w_rec=1.0)
        raise ConfigError(f"unknown stage {stage_id!r}")


@dataclass(frozen=True)
class ClipBounds:
    lambda_min: float = 0.0
    lambda_max: float = 1e4
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.lambda_min <= self.lambda_max:
            raise ConfigError(f"need 0 <= lambda_min <= lambda_max, got {self.lambda_min}, {self.lambda_max}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")


@dataclass(frozen=True)
class GradNormPair:
    g_rec_norm: float
    g_piv_norm: float
    probe_set: str = "last_block"

    def __post_init__(self):
        for v in (self.g_rec_norm, self.g_piv_norm):
            if not (v >= 0 and math.isfinite(v)):
                raise NumericError(f"gradient norms must be finite and nonnegative, got {v}")


@dataclass
class LossReport:
    """Scalar loss terms, the coefficient applied to each, and their weighted total."""

    stage: str
    terms: Dict[str, float]
    coefficients: Dict[str, float]
    total: float
    lambda_piv: Optional[float] = None
    lambda_gan: Optional[float] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return sum(self.coefficients[k] * self.terms[k] for k in self.coefficients)

    def as_row(self) -> Dict[str, float]:
        row = {"total": self.total}
        row.update(self.terms)
        if self.lambda_piv is not None:
            row["lambda_piv"] = self.lambda_piv
        if self.lambda_gan is not None:
            row["lambda_gan"] = self.lambda_gan
        row.update(self.extras)
        return row


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ConfigError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def rec_loss(x, x_hat):
    _check_same_shape(x, x_hat, "rec_loss")
    return (x - x_hat).abs().mean()


def pivot_distance(f, f_pivot, variant: str = "raw_l2", eps: float = 1e-6):
    """Mean squared distance between encoder and pivot features.

    ``normalized_l2`` first scales every grid position's feature vector to unit
    length along the channel axis (norms below ``eps`` are clamped to ``eps``).
    """
    _check_same_shape(f, f_pivot, "pivot_distance")
    if variant == "raw_l2":
        return ((f - f_pivot) ** 2).mean()
    if variant == "normalized_l2":
        a = F.normalize(f, dim=-1, eps=eps)
        b = F.normalize(f_pivot, dim=-1, eps=eps)
        return ((a - b) ** 2).mean()
    raise ConfigError(f"unknown pivot variant {variant!r}; expected one of {PIVOT_VARIANTS}")


def _clipped_ratio(num, den, bounds: ClipBounds) -> float:
    den = den + bounds.epsilon
    if den == 0:
        ratio = math.inf if num > 0 else 0.0
    else:
        ratio = num / den
    return float(min(max(ratio, bounds.lambda_min), bounds.lambda_max))


def adaptive_pivot_weight(g: GradNormPair, bounds: ClipBounds = ClipBounds()) -> float:
    return _clipped_ratio(g.g_rec_norm, g.g_piv_norm, bounds)


def adaptive_gan_weight(g_rec_norm, g_gan_norm, base_w_gan: float = 0.75, bounds: ClipBounds = ClipBounds()) -> float:
    return base_w_gan * _clipped_ratio(float(g_rec_norm), float(g_gan_norm), bounds)


def grad_norm(loss, params: Sequence[torch.Tensor]) -> float:
    """L2 norm of d(loss)/d(params), leaving the graph intact for the main backward."""
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    sq = sum(float((g.detach() ** 2).sum()) for g in grads if g is not None)
    return math.sqrt(sq)


def grad_norms(loss, param_sets: Sequence[Sequence[torch.Tensor]]) -> list:
    """:func:`grad_norm` for several parameter sets from a single backward pass."""
    flat = [p for ps in param_sets for p in ps]
    grads = torch.autograd.grad(loss, flat, retain_graph=True, allow_unused=True)
    out, i = [], 0
    for ps in param_sets:
        sq = sum(float((g.detach() ** 2).sum()) for g in grads[i : i + len(ps)] if g is not None)
        out.append(math.sqrt(sq))
        i += len(ps)
    return out


def pivot_loss(f, f_pivot, lambda_piv, variant: str = "raw_l2"):
    if float(lambda_piv) < 0:
        raise ConfigError("lambda_piv must be nonnegative")
    # The weight is a plain float: no gradient ever flows through it.
    return float(lambda_piv) * pivot_distance(f, f_pivot, variant)


def kl_loss(post: GaussianPosterior):
    """Closed-form KL(N(mu, sigma^2) || N(0, I)), summed over latent channels,
    averaged over batch and grid positions."""
    mu, lv = post.mu, post.log_var
    kl = 0.5 * (mu**2 + torch.exp(lv) - 1.0 - lv).sum(dim=-1).mean()
    if not torch.isfinite(kl):
        raise NumericError("non-finite KL", term="kl")
    return kl


def feature_consistency_loss(f, f_hat):
    """MSE between bridge reconstruction and (detached) encoder features."""
    _check_same_shape(f, f_hat, "feature_consistency_loss")
    return ((f.detach() - f_hat) ** 2).mean()


class PerceptualNet(nn.Module):
    """Fixed, randomly initialized conv feature extractor.

    Stands in for a pretrained perceptual network; weights are a pure function
    of ``seed`` and never train.
    """

    def __init__(self, channels: int = 3, widths=(16, 32, 16), seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "perceptual"))
            layers = []
            c_in = channels
            for i, w in enumerate(widths):
                stride = 1 if i == 0 else 2
                conv = nn.Conv2d(c_in, w, kernel_size=3, stride=stride, padding=1)
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                nn.init.zeros_(conv.bias)
                layers.append(conv)
                c_in = w
        self.convs = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def activations(self, x):
        acts = []
        for conv in self.convs:
            x = F.relu(conv(x))
            acts.append(x)
        return acts

    def pooled(self, x):
        """Global-average-pooled last-layer activations, shape (B, widths[-1])."""
        return self.activations(x)[-1].mean(dim=(2, 3))


def perceptual_loss(x, x_hat, feature_net: PerceptualNet):
    _check_same_shape(x, x_hat, "perceptual_loss")
    a = torch.cat([t.flatten(1) for t in feature_net.activations(x)], dim=1)
    b = torch.cat([t.flatten(1) for t in feature_net.activations(x_hat)], dim=1)
    return ((a - b) ** 2).mean()


def gan_generator_loss(disc, x_hat):
    return -disc(x_hat).mean()


def gan_discriminator_loss(disc, x, x_hat):
    """Hinge loss; ``x_hat`` is detached so only the discriminator receives gradient."""
    real = disc(x)
    fake = disc(x_hat.detach())
    return F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()


def compose_total(stage: str, terms: Mapping[str, torch.Tensor], coefficients: Mapping[str, float],
                  lambda_piv=None, lambda_gan=None, step=None):
    """Weighted sum of ``terms`` plus a :class:`LossReport` that records it.

    Terms with a zero coefficient are reported but do not enter the graph.
    """
    total = None
    values = {}
    for name, t in terms.items():
        v = float(t.detach())
        if not math.isfinite(v):
            raise NumericError("non-finite loss term", stage=stage, step=step, term=name)
        values[name] = v
    for name, c in coefficients.items():
        if c == 0:
            continue
        contrib = c * terms[name]
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros((), requires_grad=False)
    report = LossReport(
        stage=stage,
        terms=values,
        coefficients=dict(coefficients),
        total=float(total.detach()),
        lambda_piv=lambda_piv,
        lambda_gan=lambda_gan,
    )
    return total, report


def stage1_total(terms, weights: LossWeights, lambda_piv: float, lambda_gan: float, step=None):
    """rec + w_piv * lambda_piv * piv + lambda_gan * gan + w_perc * perc.

    ``lambda_gan`` is the already-resolved GAN coefficient from
    :func:`adaptive_gan_weight`, which includes the base ``w_gan``.
    """
    coefficients = {
        "rec": 1.0,
        "piv": weights.w_piv * lambda_piv,
        "gan": lambda_gan,
        "perc": weights.w_perc,
    }
    return compose_total("I", terms, coefficients, lambda_piv, lambda_gan, step)


def stage2_total(terms, weights: LossWeights, step=None):
    coefficients = {"feat": weights.w_feat, "kl": weights.w_kl, "rec": weights.w_rec}
    return compose_total("II", terms, coefficients, step=step)


def stage3_total(terms, weights: LossWeights, lambda_gan: float, step=None):
    coefficients = {"rec": 1.0, "gan": lambda_gan, "perc": weights.w_perc}
    return compose_total("III", terms, coefficients, lambda_gan=lambda_gan, step=step)


def single_total(terms, weights: LossWeights, lambda_piv: float, lambda_gan: float, step=None):
    coefficients = {
        "rec": weights.w_rec,
        "piv": weights.w_piv * lambda_piv,
        "gan": lambda_gan,
        "perc": weights.w_perc,
        "feat": weights.w_feat,
        "kl": weights.w_kl,
    }
    return compose_total("single", terms, coefficients, lambda_piv, lambda_gan, step)
