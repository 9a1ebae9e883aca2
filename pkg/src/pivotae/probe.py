"""Flow-matching probe for how easily a latent space can be modeled.

A small residual MLP learns the velocity of the linear path
``z_t = (1 - t) z0 + t eps`` from data (t=0) to noise (t=1). Validation flow
loss on held-out latents is the tractability signal; Euler sampling gives
samples whose moments are compared with the real latents.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError
from .metrics import fd_proxy
from .seeding import derive_seed, generator
from .training import ema_update


def alpha(t):
    return 1.0 - t


def sigma(t):
    return t


def _bcast(t, like):
    if isinstance(t, (int, float)):
        return t
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.reshape(-1, *([1] * (like.dim() - 1))) if t.dim() else t


def interpolate(z0, eps, t):
    """Point on the straight path at time ``t`` (scalar or one value per sample)."""
    t = _bcast(t, z0)
    return alpha(t) * z0 + sigma(t) * eps


def v_target(z0, eps):
    """d z_t / dt of :func:`interpolate`."""
    return eps - z0


def timestep_embedding(t, dim: int = 64, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * 1000.0 * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class VelocityMLP(nn.Module):
    """Residual MLP over flattened latents with a sinusoidal time embedding."""

    def __init__(self, dim: int, width: int = 512, depth: int = 3, time_dim: int = 64):
        super().__init__()
        self.time_dim = time_dim
        self.t_embed = nn.Sequential(nn.Linear(time_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.in_proj = nn.Linear(dim, width)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.LayerNorm(width), nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
            for _ in range(depth)
        )
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z, t):
        t = torch.as_tensor(t, dtype=z.dtype)
        if t.dim() == 0:
            t = t.expand(z.shape[0])
        temb = self.t_embed(timestep_embedding(t, self.time_dim))
        h = self.in_proj(z) + temb
        for blk in self.blocks:
            h = h + blk(h + temb)
        return self.out(self.norm(h))


def probe_loss(model, z0, rng: Optional[torch.Generator] = None, t=None, eps=None):
    """Flow-matching MSE with ``t ~ U[0, 1]`` per sample unless ``t`` is given."""
    if t is None:
        t = torch.rand(z0.shape[0], generator=rng)
    if eps is None:
        eps = torch.randn(z0.shape, generator=rng)
    zt = interpolate(z0, eps, t)
    return ((model(zt, t) - v_target(z0, eps)) ** 2).mean()


@torch.no_grad()
def euler_sample(model, steps: int, rng: Optional[torch.Generator] = None, shape=None, noise=None):
    """Integrate dz/dt = model(z, t) from t=1 (noise) to t=0 with uniform Euler steps."""
    if steps < 1:
        raise ConfigError("sampler needs at least one step")
    if noise is None:
        if shape is None:
            raise ConfigError("pass either noise or shape")
        noise = torch.randn(shape, generator=rng)
    z = noise.clone()
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        z = z - dt * model(z, torch.full((z.shape[0],), t, dtype=z.dtype))
    return z


def latent_moment_stats(z) -> dict:
    """Per-channel mean/std (last axis) plus global second moment and the mean
    absolute deviation of per-channel second moments from 1."""
    flat = torch.as_tensor(z, dtype=torch.float64).reshape(-1, z.shape[-1])
    mean = flat.mean(0)
    std = flat.std(0, unbiased=False)
    second = (flat**2).mean(0)
    return {
        "mean": mean.tolist(),
        "std": std.tolist(),
        "second_moment": float((flat**2).mean()),
        "second_moment_dev": float((second - 1).abs().mean()),
    }


@dataclass(frozen=True)
class ProbeConfig:
    width: int = 512
    depth: int = 3
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 100
    eval_every: int = 50
    val_repeats: int = 4
    sampler_steps: int = 50
    num_samples: int = 64
    ema_decay: float = 0.9995

    def __post_init__(self):
        if self.sampler_steps < 1:
            raise ConfigError("sampler_steps must be >= 1")
        for name in ("width", "depth", "steps", "batch_size", "eval_every", "val_repeats", "num_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"probe.{name} must be >= 1")
        if self.lr <= 0 or not 0 <= self.ema_decay <= 1 or self.warmup_steps < 0:
            raise ConfigError("invalid probe optimizer settings")


@dataclass
class ProbeRun:
    source: str
    rows: List[Tuple[int, float, float]]
    model: nn.Module
    ema: nn.Module


def _val_loss(model, val, seed, repeats):
    g = generator(seed, "probe-val")
    total = 0.0
    with torch.no_grad():
        for _ in range(repeats):
            total += float(probe_loss(model, val, g))
    return total / repeats


def train_probe(train_latents, val_latents, cfg: ProbeConfig, seed: int = 0, source: str = "latents") -> ProbeRun:
    """Fit one probe on ``(N, ...)`` latents flattened per sample."""
    train = torch.as_tensor(train_latents, dtype=torch.float32).reshape(len(train_latents), -1)
    val = torch.as_tensor(val_latents, dtype=torch.float32).reshape(len(val_latents), -1)
    if train.shape[1] != val.shape[1]:
        raise ConfigError("train and validation latents differ in size")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "probe-init"))
        model = VelocityMLP(train.shape[1], cfg.width, cfg.depth)
    ema = copy.deepcopy(model).requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.95), weight_decay=0.0)
    rows, running, count = [], 0.0, 0
    for step in range(1, cfg.steps + 1):
        for g in opt.param_groups:
            g["lr"] = cfg.lr * min(1.0, step / max(1, cfg.warmup_steps))
        rng = generator(seed, "probe-step", step)
        idx = torch.randint(len(train), (cfg.batch_size,), generator=rng)
        loss = probe_loss(model, train[idx], rng)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        # standard EMA warmup so early shadows are not dominated by the init
        decay = min(cfg.ema_decay, (1 + step) / (10 + step))
        ema_update(dict(ema.named_parameters()), dict(model.named_parameters()), decay)
        running += loss.item()
        count += 1
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rows.append((step, running / count, _val_loss(model, val, seed, cfg.val_repeats)))
            running, count = 0.0, 0
    return ProbeRun(source, rows, model, ema)


@dataclass
class TractabilityReport:
    rows: List[Tuple[str, int, float, float]]
    summary: Dict[str, dict]
    warmup_steps: int = 0

    def val_curve(self, source: str) -> List[Tuple[int, float]]:
        return [(s, v) for src, s, _, v in self.rows if src == source]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "step", "train_loss", "val_loss"])
        for src, step, tr, va in self.rows:
            w.writerow([src, step, repr(tr), repr(va)])
        return buf.getvalue()

    def summary_text(self) -> str:
        return json.dumps(self.summary, indent=1, sort_keys=True) + "\n"


def tractability_report(sources: Mapping[str, Tuple[torch.Tensor, torch.Tensor]], cfg: ProbeConfig,
                        seed: int = 0) -> TractabilityReport:
    """Train one probe per latent source with the same seed and config.

    ``sources`` maps a name to ``(train, val)`` latent grids shaped
    ``(N, h, w, channels)``. Sources may differ in channel count; each probe
    is sized to its own input.
    """
    rows, summary = [], {}
    for name, (train, val) in sources.items():
        run = train_probe(train, val, cfg, seed, name)
        rows.extend((name, s, tr, va) for s, tr, va in run.rows)
        n = cfg.num_samples
        flat_dim = val[0].numel()
        samples = euler_sample(run.ema, cfg.sampler_steps, generator(seed, "probe-sample"), shape=(n, flat_dim))
        samples = samples.reshape(n, *val.shape[1:])
        real_tok = val.reshape(-1, val.shape[-1])
        fake_tok = samples.reshape(-1, samples.shape[-1])
        try:
            fd = fd_proxy(real_tok.double().numpy(), fake_tok.double().numpy())
        except ConfigError:
            fd = None
        real_stats = latent_moment_stats(val)
        fake_stats = latent_moment_stats(samples)
        summary[name] = {
            "channels": int(val.shape[-1]),
            "flat_dim": int(flat_dim),
            "final_val_loss": run.rows[-1][2],
            "real_second_moment": real_stats["second_moment"],
            "sample_second_moment": fake_stats["second_moment"],
            "real_mean_std": float(sum(real_stats["std"]) / len(real_stats["std"])),
            "sample_mean_std": float(sum(fake_stats["std"]) / len(fake_stats["std"])),
            "fd_proxy": fd,
        }
    return TractabilityReport(rows, summary, cfg.warmup_steps)
