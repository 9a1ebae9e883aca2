"""Encoder / bridge / decoder pipeline.

Tensor layout: images are ``(B, C, H, W)`` in [-1, 1]; representation
features and latents are channel-last grids ``(B, h, w, channels)`` with
``h = H / patch_size``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch import ArchConfig
from .errors import ConfigError, NumericError
from .seeding import derive_seed

# Parameter groups that a stage plan can make trainable. The pivot replica is
# never in this list.
TRAINABLE_GROUPS = ("encoder", "decoder", "bridge_encoder", "bridge_decoder", "discriminator")


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = max(1, int(dim * mlp_ratio))
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(B, N, 3, self.heads, C // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(attn.transpose(1, 2).reshape(B, N, C))
        return x + self.mlp(self.norm2(x))


class TokenTransformer(nn.Module):
    """in_proj -> learned positions -> blocks -> norm -> head, over a token grid."""

    def __init__(self, in_dim, width, out_dim, depth, heads, num_tokens, mlp_ratio=4.0):
        super().__init__()
        self.in_proj = nn.Linear(in_dim, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, num_tokens, width))
        self.blocks = nn.ModuleList(Block(width, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, out_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, tokens):
        x = self.in_proj(tokens) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))


class RepEncoder(nn.Module):
    """ViT-style representation encoder: image -> (B, h, w, D) feature grid.

    Ends in a LayerNorm so features have a stable per-token scale, as in
    pretrained ViT backbones.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        p, D = arch.patch_size, arch.rep_dim
        self.patch_embed = nn.Conv2d(arch.channels, D, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, arch.num_tokens, D))
        self.blocks = nn.ModuleList(
            Block(D, arch.encoder_heads, arch.mlp_ratio) for _ in range(arch.encoder_layers)
        )
        self.norm = nn.LayerNorm(D)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x):
        B = x.shape[0]
        g = self.arch.grid
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens).reshape(B, g, g, -1)


class BridgeEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.net = TokenTransformer(
            arch.rep_dim,
            arch.bridge_hidden,
            2 * arch.latent_dim,
            arch.bridge_enc_layers,
            arch.bridge_heads,
            arch.num_tokens,
            arch.bridge_enc_mlp_ratio,
        )

    def forward(self, f):
        B, h, w, _ = f.shape
        out = self.net(f.reshape(B, h * w, -1)).reshape(B, h, w, -1)
        mu, log_var = out.chunk(2, dim=-1)
        return mu, log_var.clamp(self.arch.log_var_min, self.arch.log_var_max)


class BridgeDecoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.net = TokenTransformer(
            arch.latent_dim,
            arch.bridge_hidden,
            arch.rep_dim,
            arch.bridge_dec_layers,
            arch.bridge_heads,
            arch.num_tokens,
            arch.bridge_dec_mlp_ratio,
        )

    def forward(self, z):
        B, h, w, _ = z.shape
        return self.net(z.reshape(B, h * w, -1)).reshape(B, h, w, -1)


class PixelDecoder(nn.Module):
    """Feature grid -> image, one linear patch head per token, tanh-bounded."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        p = arch.patch_size
        self.net = TokenTransformer(
            arch.rep_dim,
            arch.decoder_hidden,
            p * p * arch.channels,
            arch.decoder_layers,
            arch.decoder_heads,
            arch.num_tokens,
            arch.mlp_ratio,
        )

    @property
    def last_layer(self) -> nn.Linear:
        return self.net.head

    def forward(self, f):
        B, h, w, _ = f.shape
        p, C = self.arch.patch_size, self.arch.channels
        patches = self.net(f.reshape(B, h * w, -1))
        img = patches.reshape(B, h, w, p, p, C).permute(0, 5, 1, 3, 2, 4)
        return torch.tanh(img.reshape(B, C, h * p, w * p))


class PatchDiscriminator(nn.Module):
    """Small ViT that emits one real/fake logit per image patch, shape (B, h, w)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        p = arch.patch_size
        self.patch_embed = nn.Conv2d(arch.channels, arch.disc_hidden, kernel_size=p, stride=p)
        self.net = TokenTransformer(
            arch.disc_hidden,
            arch.disc_hidden,
            1,
            arch.disc_layers,
            arch.disc_heads,
            arch.num_tokens,
            arch.mlp_ratio,
        )

    def forward(self, x):
        B = x.shape[0]
        g = self.arch.grid
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        return self.net(tokens).reshape(B, g, g)


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _seeded(factory, seed, name):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init", name))
        module = factory()
        _init_weights(module)
    return module


class ModelBundle(nn.Module):
    """All networks of the tokenizer plus the discriminator.

    ``pivot`` is a deep copy of ``encoder`` taken at construction, so the two
    are bit-identical at step 0 and share no storage afterwards.
    """

    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.seed = seed
        # Each network draws its init from its own stream, so changing e.g. the
        # latent width leaves the encoder and decoder initialization untouched.
        self.encoder = _seeded(lambda: RepEncoder(arch), seed, "encoder")
        self.pivot = copy.deepcopy(self.encoder)
        self.bridge_encoder = _seeded(lambda: BridgeEncoder(arch), seed, "bridge_encoder")
        self.bridge_decoder = _seeded(lambda: BridgeDecoder(arch), seed, "bridge_decoder")
        self.decoder = _seeded(lambda: PixelDecoder(arch), seed, "decoder")
        self.discriminator = _seeded(lambda: PatchDiscriminator(arch), seed, "discriminator")
        self.pivot.requires_grad_(False)

    def group(self, name: str) -> nn.Module:
        if name not in TRAINABLE_GROUPS and name != "pivot":
            raise ConfigError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def load_pretrained_encoder(self, state_dict) -> None:
        """Load external encoder weights and re-sync the pivot replica to them."""
        self.encoder.load_state_dict(state_dict)
        self.pivot.load_state_dict(state_dict)
        self.pivot.requires_grad_(False)


@dataclass
class GaussianPosterior:
    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ConfigError(
                f"posterior mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} differ"
            )


@dataclass
class ForwardOutputs:
    x: torch.Tensor
    f: torch.Tensor
    f_pivot: torch.Tensor
    x_hat: torch.Tensor
    posterior: Optional[GaussianPosterior] = None
    z: Optional[torch.Tensor] = None
    f_hat: Optional[torch.Tensor] = None


def _check_finite(t, what):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def _check_image(bundle: ModelBundle, x):
    a = bundle.arch
    expected = (a.channels, a.image_size, a.image_size)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ConfigError(f"expected images of shape (B, {expected}), got {tuple(x.shape)}")


def _check_grid(bundle: ModelBundle, t, channels, what):
    g = bundle.arch.grid
    if t.dim() != 4 or tuple(t.shape[1:]) != (g, g, channels):
        raise ConfigError(f"{what} must have shape (B, {g}, {g}, {channels}), got {tuple(t.shape)}")


def encode(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    _check_image(bundle, x)
    return bundle.encoder(x)


def pivot_encode(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    """Pivot features. Always computed without autograd; training-time only."""
    _check_image(bundle, x)
    with torch.no_grad():
        return bundle.pivot(x)


def bridge_encode(bundle: ModelBundle, f: torch.Tensor) -> GaussianPosterior:
    _check_grid(bundle, f, bundle.arch.rep_dim, "feature")
    mu, log_var = bundle.bridge_encoder(f)
    _check_finite(mu, "bridge posterior mean")
    _check_finite(log_var, "bridge posterior log-variance")
    return GaussianPosterior(mu, log_var)


def reparameterize(post: GaussianPosterior, eps: torch.Tensor) -> torch.Tensor:
    if eps.shape != post.mu.shape:
        raise ConfigError(f"eps shape {tuple(eps.shape)} != mu shape {tuple(post.mu.shape)}")
    return post.mu + torch.exp(0.5 * post.log_var) * eps


def bridge_decode(bundle: ModelBundle, z: torch.Tensor) -> torch.Tensor:
    _check_grid(bundle, z, bundle.arch.latent_dim, "latent")
    return _check_finite(bundle.bridge_decoder(z), "bridge reconstruction")


def decode(bundle: ModelBundle, f_hat: torch.Tensor) -> torch.Tensor:
    _check_grid(bundle, f_hat, bundle.arch.rep_dim, "feature")
    return _check_finite(bundle.decoder(f_hat), "decoded image")


def noise_inject(f: torch.Tensor, sigma: float, rng: Optional[torch.Generator] = None) -> torch.Tensor:
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return f
    return f + sigma * torch.randn(f.shape, generator=rng, dtype=f.dtype)


def forward_full(bundle: ModelBundle, x, rng: Optional[torch.Generator], plan) -> ForwardOutputs:
    """Run the pipeline topology selected by ``plan`` for one training step.

    Without the bridge, the decoder reads the (optionally noise-injected)
    encoder features directly. With it, the full encoder -> posterior ->
    sample -> bridge decoder -> decoder chain runs. ``plan`` only needs
    ``bridge_active`` and ``noise_sigma`` attributes.
    """
    f = encode(bundle, x)
    f_pivot = pivot_encode(bundle, x)
    if not plan.bridge_active:
        x_hat = decode(bundle, noise_inject(f, plan.noise_sigma, rng))
        return ForwardOutputs(x=x, f=f, f_pivot=f_pivot, x_hat=x_hat)
    post = bridge_encode(bundle, f)
    eps = torch.randn(post.mu.shape, generator=rng, dtype=post.mu.dtype)
    z = reparameterize(post, eps)
    f_hat = bridge_decode(bundle, z)
    x_hat = decode(bundle, noise_inject(f_hat, plan.noise_sigma, rng))
    return ForwardOutputs(x=x, f=f, f_pivot=f_pivot, x_hat=x_hat, posterior=post, z=z, f_hat=f_hat)


@torch.no_grad()
def reconstruct(bundle: ModelBundle, x, use_bridge: bool = True) -> torch.Tensor:
    """Deterministic inference path: posterior mean, no noise, no pivot."""
    f = encode(bundle, x)
    if not use_bridge:
        return decode(bundle, f)
    return decode(bundle, bridge_decode(bundle, bridge_encode(bundle, f).mu))
