"""Checkpoint directory format.

A checkpoint is a directory holding two files:

``manifest``
    JSON text: format version, stage id, architecture (plus its digest), the
    training-state summary, and one entry per tensor with name, dtype, shape,
    byte offset, byte length and sha256. ``manifest_sha256`` covers every
    other field.
``params.bin``
    All tensors as little-endian float32, concatenated in manifest order.

Both files are written to a temporary name and renamed into place, manifest
last, so a reader never sees a manifest pointing at a half-written blob.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .arch import ArchConfig
from .errors import CheckpointError
from .tokenizer import ModelBundle

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest"
BLOB_NAME = "params.bin"


@dataclass
class TensorEntry:
    name: str
    dtype: str
    shape: List[int]
    offset: int
    nbytes: int
    sha256: str


@dataclass
class CheckpointManifest:
    stage_id: str
    arch: dict
    arch_digest: str
    state: dict
    tensors: List[TensorEntry]
    blob_sha256: str
    format_version: int = FORMAT_VERSION
    manifest_sha256: str = ""
    path: Optional[str] = field(default=None, compare=False)

    def body(self) -> dict:
        return {
            "format_version": self.format_version,
            "stage_id": self.stage_id,
            "arch": self.arch,
            "arch_digest": self.arch_digest,
            "state": self.state,
            "tensors": [vars(t) for t in self.tensors],
            "blob_sha256": self.blob_sha256,
        }

    def compute_hash(self) -> str:
        return hashlib.sha256(_canonical(self.body()).encode()).hexdigest()

    def to_text(self) -> str:
        data = self.body()
        data["manifest_sha256"] = self.manifest_sha256
        return json.dumps(data, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str, path=None) -> "CheckpointManifest":
        data = json.loads(text)
        return cls(
            stage_id=data["stage_id"],
            arch=data["arch"],
            arch_digest=data["arch_digest"],
            state=data["state"],
            tensors=[TensorEntry(**t) for t in data["tensors"]],
            blob_sha256=data["blob_sha256"],
            format_version=data["format_version"],
            manifest_sha256=data["manifest_sha256"],
            path=str(path) if path is not None else None,
        )


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(bundle: ModelBundle, state, path, stage_id: Optional[str] = None) -> CheckpointManifest:
    """Write ``bundle`` parameters and ``state`` summary to directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks, entries = [], []
    offset = 0
    for name, tensor in bundle.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append(
            TensorEntry(name, "float32", list(arr.shape), offset, len(raw), hashlib.sha256(raw).hexdigest())
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    summary = state.summary() if hasattr(state, "summary") else dict(state)
    manifest = CheckpointManifest(
        stage_id=stage_id if stage_id is not None else summary.get("stage", ""),
        arch=bundle.arch.to_dict(),
        arch_digest=bundle.arch.digest(),
        state=summary,
        tensors=entries,
        blob_sha256=hashlib.sha256(blob).hexdigest(),
    )
    manifest.manifest_sha256 = manifest.compute_hash()
    manifest.path = str(path)
    _atomic_write(path / BLOB_NAME, blob)
    _atomic_write(path / MANIFEST_NAME, manifest.to_text().encode())
    return manifest


def read_manifest(path) -> CheckpointManifest:
    path = Path(path)
    mpath = path / MANIFEST_NAME
    if not mpath.is_file():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = CheckpointManifest.from_text(mpath.read_text(), path)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from exc
    if manifest.format_version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.format_version}")
    if manifest.compute_hash() != manifest.manifest_sha256:
        raise CheckpointError(f"manifest hash mismatch in {mpath}; refusing to load")
    return manifest


def load_checkpoint(path, arch: Optional[ArchConfig] = None):
    """Return ``(bundle, state_summary, manifest)``.

    If ``arch`` is given it must match the checkpoint's architecture exactly.
    """
    path = Path(path)
    manifest = read_manifest(path)
    stored_arch = ArchConfig(**manifest.arch)
    if stored_arch.digest() != manifest.arch_digest:
        raise CheckpointError("architecture digest does not match the stored architecture")
    if arch is not None and arch.digest() != manifest.arch_digest:
        raise CheckpointError(
            f"checkpoint architecture {manifest.arch_digest[:12]} does not match requested {arch.digest()[:12]}"
        )
    blob = (path / BLOB_NAME).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.blob_sha256:
        raise CheckpointError(f"parameter blob hash mismatch in {path}")

    bundle = ModelBundle(stored_arch, seed=int(manifest.state.get("seed", 0)))
    expected = bundle.state_dict()
    names = [t.name for t in manifest.tensors]
    if len(set(names)) != len(names) or set(names) != set(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise CheckpointError(f"tensor set mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    loaded = {}
    for t in manifest.tensors:
        raw = blob[t.offset : t.offset + t.nbytes]
        if hashlib.sha256(raw).hexdigest() != t.sha256:
            raise CheckpointError(f"tensor {t.name} failed its hash check")
        arr = np.frombuffer(raw, dtype="<f4").reshape(t.shape)
        if tuple(arr.shape) != tuple(expected[t.name].shape):
            raise CheckpointError(f"tensor {t.name} has shape {arr.shape}, expected {tuple(expected[t.name].shape)}")
        loaded[t.name] = torch.from_numpy(arr.copy())
    bundle.load_state_dict(loaded)
    bundle.pivot.requires_grad_(False)
    return bundle, dict(manifest.state), manifest


def load_tensors(path, prefix: str = "") -> dict:
    """Read raw tensors (optionally only those under ``prefix``) from a checkpoint.

    Used to pull external pretrained encoder weights into a fresh bundle.
    """
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB_NAME).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.blob_sha256:
        raise CheckpointError(f"parameter blob hash mismatch in {path}")
    out = {}
    for t in manifest.tensors:
        if not t.name.startswith(prefix):
            continue
        arr = np.frombuffer(blob[t.offset : t.offset + t.nbytes], dtype="<f4").reshape(t.shape)
        out[t.name[len(prefix) :]] = torch.from_numpy(arr.copy())
    return out
