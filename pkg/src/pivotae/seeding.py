"""Deterministic seed derivation.

Every random stream (network init, data order, per-step noise) is keyed by
the experiment seed plus a label, so streams never depend on call order.
"""

import hashlib

import torch


def derive_seed(seed: int, *labels) -> int:
    key = ":".join([str(seed), *map(str, labels)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & (2**63 - 1)


def generator(seed: int, *labels) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *labels))
    return g
