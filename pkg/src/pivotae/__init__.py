"""Representation-pivoted autoencoder: a frozen-pivot-regularized encoder,
a variational bridge to a compact latent, a pixel decoder, staged training,
and a flow-matching probe of latent tractability."""

from .arch import ArchConfig, desk_preset, reference_preset
from .errors import CheckpointError, ConfigError, NumericError
from .tokenizer import ModelBundle

__all__ = [
    "ArchConfig",
    "CheckpointError",
    "ConfigError",
    "ModelBundle",
    "NumericError",
    "desk_preset",
    "reference_preset",
]
__version__ = "0.1.0"
