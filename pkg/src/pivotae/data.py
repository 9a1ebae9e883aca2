"""Dataset ingestion and the synthetic shapes fixture."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import ConfigError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
SHAPES = ("circle", "square", "triangle", "cross")


def render_shapes(n: int, size: int = 64, seed: int = 0):
    """Draw ``n`` images of one colored shape on a plain background.

    Returns ``(images, labels)`` with images as uint8 ``(n, size, size, 3)``
    and labels the shape class index. Output is a pure function of the
    arguments.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = int(rng.integers(len(SHAPES)))
        bg = rng.integers(0, 256, 3)
        fg = rng.integers(0, 256, 3)
        # push the foreground away from the background so every shape is visible
        while np.abs(fg.astype(int) - bg.astype(int)).sum() < 180:
            fg = rng.integers(0, 256, 3)
        img = Image.new("RGB", (size, size), tuple(int(c) for c in bg))
        draw = ImageDraw.Draw(img)
        r = rng.uniform(0.15, 0.3) * size
        cx, cy = rng.uniform(r, size - r, 2)
        color = tuple(int(c) for c in fg)
        box = [cx - r, cy - r, cx + r, cy + r]
        if SHAPES[cls] == "circle":
            draw.ellipse(box, fill=color)
        elif SHAPES[cls] == "square":
            draw.rectangle(box, fill=color)
        elif SHAPES[cls] == "triangle":
            draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
        else:
            t = r / 3
            draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=color)
            draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=color)
        images[i] = np.asarray(img)
        labels[i] = cls
    return images, labels


def to_tensor(images_u8: np.ndarray) -> torch.Tensor:
    """uint8 HWC batch -> float32 NCHW in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images_u8)).float().permute(0, 3, 1, 2)
    return (x / 127.5 - 1.0).clamp(-1.0, 1.0)


def write_fixture(out_dir, n: int = 64, size: int = 64, seed: int = 0) -> Path:
    """Write the shapes fixture as PNG files plus ``labels.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels = render_shapes(n, size, seed)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        name = f"img_{i:04d}.png"
        Image.fromarray(img).save(out_dir / name)
        lines.append(f"{name}\t{int(lab)}")
    (out_dir / "labels.tsv").write_text("\n".join(lines) + "\n")
    return out_dir


@dataclass(frozen=True)
class DatasetSpec:
    """Where images come from and how they are split.

    ``root`` is either an image directory or ``synthetic:N[:seed]`` for the
    in-memory shapes fixture.
    """

    root: str
    labels_file: Optional[str] = None
    image_size: int = 64
    val_fraction: float = 0.0
    split_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.image_size < 1:
            raise ConfigError("image_size must be positive")


@dataclass
class Split:
    images: torch.Tensor
    labels: Optional[torch.Tensor]
    names: List[str]

    def __len__(self):
        return self.images.shape[0]


@dataclass
class Dataset:
    train: Split
    val: Split


def _split_indices(n: int, fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _parse_synthetic(root: str):
    parts = root.split(":")
    try:
        n = int(parts[1])
        seed = int(parts[2]) if len(parts) > 2 else 0
    except (IndexError, ValueError):
        raise ConfigError(f"bad synthetic dataset spec {root!r}; expected synthetic:N[:seed]") from None
    if n < 1:
        raise ConfigError("synthetic dataset needs at least one image")
    return n, seed


def _read_labels(path: Path):
    table = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, cls = line.split("\t")
            table[rel] = int(cls)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: expected 'relative-path<TAB>class-id'") from None
    return table


def load_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.root.startswith("synthetic:"):
        n, seed = _parse_synthetic(spec.root)
        images, labels = render_shapes(n, spec.image_size, seed)
        names = [f"synthetic_{i:05d}" for i in range(n)]
        label_arr = labels
    else:
        root = Path(spec.root)
        if not root.is_dir():
            raise ConfigError(f"dataset directory {root} does not exist")
        files = sorted(
            str(p.relative_to(root)) for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise ConfigError(f"no images found under {root}")
        images = np.stack([load_image(root / f, spec.image_size) for f in files])
        names = files
        label_path = Path(spec.labels_file) if spec.labels_file else root / "labels.tsv"
        if spec.labels_file and not label_path.is_file():
            raise ConfigError(f"label file {label_path} does not exist")
        if label_path.is_file():
            table = _read_labels(label_path)
            missing = [f for f in files if f not in table]
            if missing:
                raise ConfigError(f"{len(missing)} images have no label, e.g. {missing[0]}")
            label_arr = np.array([table[f] for f in files], dtype=np.int64)
        else:
            label_arr = None

    x = to_tensor(images)
    tr, va = _split_indices(len(names), spec.val_fraction, spec.split_seed)

    def take(idx):
        lab = torch.from_numpy(label_arr[idx]) if label_arr is not None else None
        return Split(x[torch.from_numpy(idx)], lab, [names[i] for i in idx])

    return Dataset(train=take(tr), val=take(va))
