"""Architecture configuration and presets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError


@dataclass(frozen=True)
class ArchConfig:
    """Dimensions of every network in the tokenizer.

    Defaults are the desk-scale preset (64x64 images, 8x8 grid). Use
    :func:`reference_preset` for the full-size reference dimensions.
    """

    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    rep_dim: int = 192
    latent_dim: int = 16

    encoder_layers: int = 4
    encoder_heads: int = 3
    mlp_ratio: float = 4.0

    bridge_enc_layers: int = 1
    bridge_dec_layers: int = 2
    bridge_hidden: int = 192
    bridge_heads: int = 2
    bridge_enc_mlp_ratio: float = 1.0
    bridge_dec_mlp_ratio: float = 4.0

    decoder_layers: int = 4
    decoder_hidden: int = 192
    decoder_heads: int = 3

    disc_layers: int = 2
    disc_hidden: int = 96
    disc_heads: int = 2

    log_var_min: float = -10.0
    log_var_max: float = 10.0

    def __post_init__(self):
        self.validate()

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.startswith("log_var"):
                continue
            if value <= 0:
                raise ConfigError(f"arch.{f.name} must be positive, got {value}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.latent_dim >= self.rep_dim:
            raise ConfigError(
                f"latent_dim ({self.latent_dim}) must be smaller than rep_dim ({self.rep_dim})"
            )
        for dim, heads, name in (
            (self.rep_dim, self.encoder_heads, "encoder"),
            (self.bridge_hidden, self.bridge_heads, "bridge"),
            (self.decoder_hidden, self.decoder_heads, "decoder"),
            (self.disc_hidden, self.disc_heads, "disc"),
        ):
            if dim % heads:
                raise ConfigError(f"{name} width {dim} is not divisible by {heads} heads")
        if not self.log_var_min < self.log_var_max:
            raise ConfigError("log_var_min must be below log_var_max")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Stable hash used to match checkpoints to configs."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_updates(self, **kwargs) -> "ArchConfig":
        return replace(self, **kwargs)


def desk_preset(**overrides) -> ArchConfig:
    return ArchConfig(**overrides)


def reference_preset(**overrides) -> ArchConfig:
    """Full-size dimensions: ViT-B encoder, ViT-XL-width decoder, ViT-S discriminator."""
    base = dict(
        image_size=256,
        patch_size=16,
        rep_dim=768,
        latent_dim=64,
        encoder_layers=12,
        encoder_heads=12,
        bridge_enc_layers=1,
        bridge_dec_layers=6,
        bridge_hidden=768,
        bridge_heads=8,
        decoder_layers=24,
        decoder_hidden=1536,
        decoder_heads=24,
        disc_layers=12,
        disc_hidden=384,
        disc_heads=6,
    )
    base.update(overrides)
    return ArchConfig(**base)
