"""Three-stage objective-decoupled training.

Stage I tunes the encoder and pixel decoder with pivot regularization while
the bridge is bypassed; Stage II trains only the variational bridge; Stage III
fine-tunes only the pixel decoder (and discriminator) on bridge outputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence

import torch

from . import losses as L
from .arch import ArchConfig
from .checkpoint import CheckpointManifest, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, NumericError
from .seeding import generator
from .tokenizer import TRAINABLE_GROUPS, ModelBundle, forward_full

log = logging.getLogger(__name__)

STAGE_IDS = ("I", "II", "III", "single")
STAGE_DIRS = {"I": "stage1", "II": "stage2", "III": "stage3", "single": "single"}
GRAD_PROBES = ("last_block", "full")

_DEFAULT_TRAINABLE = {
    "I": frozenset({"encoder", "decoder", "discriminator"}),
    "II": frozenset({"bridge_encoder", "bridge_decoder"}),
    "III": frozenset({"decoder", "discriminator"}),
    "single": frozenset(TRAINABLE_GROUPS),
}
_DEFAULT_EPOCHS = {"I": 16, "II": 32, "III": 16, "single": 64}
# Groups each stage is never allowed to train; enforcing these keeps the
# objectives decoupled.
_FORBIDDEN = {
    "I": frozenset({"bridge_encoder", "bridge_decoder"}),
    "II": frozenset({"encoder", "decoder", "discriminator"}),
    "III": frozenset({"encoder", "bridge_encoder", "bridge_decoder"}),
    "single": frozenset(),
}


@dataclass(frozen=True)
class StagePlan:
    stage_id: str
    trainable: FrozenSet[str]
    weights: L.LossWeights
    epochs: int
    noise_sigma: float
    bridge_active: bool
    pivot_variant: str = "raw_l2"
    grad_probe: str = "last_block"
    adaptive_piv: bool = True
    adaptive_gan: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.stage_id not in STAGE_IDS:
            raise ConfigError(f"unknown stage {self.stage_id!r}")
        unknown = set(self.trainable) - set(TRAINABLE_GROUPS)
        if unknown:
            raise ConfigError(f"stage {self.stage_id}: unknown or untrainable groups {sorted(unknown)}")
        clash = set(self.trainable) & _FORBIDDEN[self.stage_id]
        if clash:
            raise ConfigError(f"stage {self.stage_id} cannot train {sorted(clash)}")
        if self.stage_id == "I" and self.bridge_active:
            raise ConfigError("stage I bypasses the bridge; bridge_active must be false")
        if self.stage_id in ("II", "III", "single") and not self.bridge_active:
            raise ConfigError(f"stage {self.stage_id} needs the bridge active")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.pivot_variant not in L.PIVOT_VARIANTS:
            raise ConfigError(f"unknown pivot variant {self.pivot_variant!r}")
        if self.grad_probe not in GRAD_PROBES:
            raise ConfigError(f"grad_probe must be one of {GRAD_PROBES}")

    @property
    def uses_pivot(self) -> bool:
        return self.weights.w_piv > 0 and "encoder" in self.trainable

    @property
    def uses_gan(self) -> bool:
        return self.weights.w_gan > 0

    def total_steps(self, steps_per_epoch: int) -> int:
        return self.max_steps if self.max_steps is not None else self.epochs * steps_per_epoch


def build_stage_plan(stage_id: str, **overrides) -> StagePlan:
    """Stage defaults with ``overrides`` applied.

    Loss-weight fields (``w_piv``, ``w_kl``, ...) may be passed directly and
    are folded into the plan's :class:`LossWeights`.
    """
    if stage_id not in STAGE_IDS:
        raise ConfigError(f"unknown stage {stage_id!r}; expected one of {STAGE_IDS}")
    weight_keys = set(L.LossWeights.__dataclass_fields__)
    weight_over = {k: overrides.pop(k) for k in list(overrides) if k in weight_keys}
    weights = overrides.pop("weights", None) or L.LossWeights.for_stage(stage_id)
    if weight_over:
        weights = replace(weights, **weight_over)
    base = dict(
        stage_id=stage_id,
        trainable=_DEFAULT_TRAINABLE[stage_id],
        weights=weights,
        epochs=_DEFAULT_EPOCHS[stage_id],
        noise_sigma=0.8 if stage_id == "I" else 0.0,
        bridge_active=stage_id != "I",
    )
    if "trainable" in overrides:
        overrides["trainable"] = frozenset(overrides["trainable"])
    unknown = set(overrides) - set(StagePlan.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown stage plan fields {sorted(unknown)}")
    base.update(overrides)
    return StagePlan(**base)


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 2e-4
    final_lr: float = 2e-5
    warmup_epochs: float = 1.0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1e-4
    batch_size: int = 16
    grad_clip: float = 1.0

    def __post_init__(self):
        if not self.peak_lr >= self.final_lr >= 0:
            raise ConfigError("need peak_lr >= final_lr >= 0")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)")


def lr_at(step: int, total_steps: int, cfg: OptimConfig, warmup_steps: int = 0) -> float:
    """Linear warmup from zero to ``peak_lr``, then cosine decay to ``final_lr``."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return cfg.peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return cfg.peak_lr
    progress = (step - warmup_steps) / span
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def apply_freeze(bundle: ModelBundle, plan: StagePlan) -> None:
    for name in TRAINABLE_GROUPS:
        bundle.group(name).requires_grad_(name in plan.trainable)
    bundle.pivot.requires_grad_(False)


def trainable_parameters(bundle: ModelBundle, plan: StagePlan, include_disc: bool = False):
    groups = [g for g in TRAINABLE_GROUPS if g in plan.trainable and (include_disc or g != "discriminator")]
    return [(f"{g}.{n}", p) for g in groups for n, p in bundle.group(g).named_parameters()]


def _param_groups(named, weight_decay):
    decay, no_decay = [], []
    for name, p in named:
        if p.ndim < 2 or "pos_embed" in name:
            no_decay.append(p)
        else:
            decay.append(p)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": weight_decay})
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return groups


def ema_update(shadow: Dict[str, torch.Tensor], params: Dict[str, torch.Tensor], decay: float = 0.9995) -> None:
    """In place: shadow <- decay * shadow + (1 - decay) * params."""
    with torch.no_grad():
        for name, s in shadow.items():
            s.mul_(decay).add_(params[name].detach(), alpha=1.0 - decay)


@dataclass
class TrainState:
    seed: int
    stage: str = "I"
    step: int = 0
    epoch: int = 0
    history: List[L.LossReport] = field(default_factory=list)

    def summary(self) -> dict:
        # Every random draw is derived from (seed, stage, step/epoch), so these
        # counters are the complete RNG state.
        return {"seed": self.seed, "stage": self.stage, "step": self.step, "epoch": self.epoch}


def _all_finite(t) -> bool:
    return bool(torch.isfinite(t).all())


class StageTrainer:
    """Owns the optimizers and schedule for one stage of one bundle."""

    def __init__(
        self,
        bundle: ModelBundle,
        plan: StagePlan,
        optim: OptimConfig,
        state: TrainState,
        steps_per_epoch: int,
        feature_net: Optional[L.PerceptualNet] = None,
        bounds: L.ClipBounds = L.ClipBounds(),
    ):
        self.bundle = bundle
        self.plan = plan
        self.optim = optim
        self.state = state
        self.bounds = bounds
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = plan.total_steps(steps_per_epoch)
        self.warmup_steps = int(round(optim.warmup_epochs * steps_per_epoch))
        self.feature_net = feature_net or L.PerceptualNet(bundle.arch.channels)
        apply_freeze(bundle, plan)

        gen_named = trainable_parameters(bundle, plan)
        self.gen_params = [p for _, p in gen_named]
        self.opt = (
            torch.optim.AdamW(_param_groups(gen_named, optim.weight_decay), lr=0.0, betas=tuple(optim.betas))
            if gen_named
            else None
        )
        self.train_disc = "discriminator" in plan.trainable and plan.uses_gan
        self.disc_opt = None
        if self.train_disc:
            disc_named = [(n, p) for n, p in bundle.discriminator.named_parameters()]
            self.disc_opt = torch.optim.AdamW(
                _param_groups(disc_named, optim.weight_decay), lr=0.0, betas=tuple(optim.betas)
            )
        enc = bundle.encoder
        if plan.grad_probe == "last_block" and len(enc.blocks):
            self.piv_probe = list(enc.blocks[-1].parameters())
        else:
            self.piv_probe = list(enc.parameters())
        self.gan_probe = [bundle.decoder.last_layer.weight]

    def _set_lr(self, lr):
        for opt in (self.opt, self.disc_opt):
            if opt is not None:
                for g in opt.param_groups:
                    g["lr"] = lr

    def _adaptive_weights(self, terms):
        """Resolve ``(lambda_piv, lambda_gan)``; None where the term is unused."""
        plan = self.plan
        need_piv = plan.uses_pivot and plan.adaptive_piv
        need_gan = plan.uses_gan and plan.adaptive_gan and "decoder" in plan.trainable
        probes = ([self.piv_probe] if need_piv else []) + ([self.gan_probe] if need_gan else [])
        # one backward of the reconstruction loss serves both probe sets
        rec_norms = L.grad_norms(terms["rec"], probes) if probes else []
        lam_piv = lam_gan = None
        if plan.uses_pivot:
            lam_piv = 1.0
            if need_piv:
                pair = L.GradNormPair(rec_norms[0], L.grad_norm(terms["piv"], self.piv_probe), plan.grad_probe)
                lam_piv = L.adaptive_pivot_weight(pair, self.bounds)
        if plan.uses_gan:
            lam_gan = plan.weights.w_gan
            if need_gan:
                g_gan = L.grad_norm(terms["gan"], self.gan_probe)
                lam_gan = L.adaptive_gan_weight(rec_norms[-1], g_gan, plan.weights.w_gan, self.bounds)
        return lam_piv, lam_gan

    def train_step(self, x: torch.Tensor) -> L.LossReport:
        plan, state, bundle = self.plan, self.state, self.bundle
        step = state.step
        if step >= self.total_steps:
            raise ConfigError(f"stage {plan.stage_id} already finished {self.total_steps} steps")
        lr = lr_at(step, self.total_steps, self.optim, self.warmup_steps)
        self._set_lr(lr)
        rng = generator(state.seed, "step", plan.stage_id, step)

        disc = bundle.discriminator
        disc.requires_grad_(False)
        try:
            out = forward_full(bundle, x, rng, plan)
        except NumericError as exc:
            if exc.stage is not None:
                raise
            raise NumericError(str(exc), stage=plan.stage_id, step=step, term="forward") from exc
        w = plan.weights

        terms = {"rec": L.rec_loss(x, out.x_hat)}
        if plan.uses_pivot:
            terms["piv"] = L.pivot_distance(out.f, out.f_pivot, plan.pivot_variant)
        if w.w_perc > 0 and plan.stage_id != "II":
            terms["perc"] = L.perceptual_loss(x, out.x_hat, self.feature_net)
        if plan.uses_gan:
            terms["gan"] = L.gan_generator_loss(disc, out.x_hat)
        if plan.bridge_active:
            terms["feat"] = L.feature_consistency_loss(out.f, out.f_hat)
            terms["kl"] = L.kl_loss(out.posterior)
        for name, t in terms.items():
            if not _all_finite(t):
                raise NumericError("non-finite loss term", stage=plan.stage_id, step=step, term=name)

        lam_piv, lam_gan = self._adaptive_weights(terms)
        if plan.stage_id == "I":
            total, report = L.stage1_total(
                _with_zero(terms, "piv", "gan", "perc"), w, lam_piv or 0.0, lam_gan or 0.0, step
            )
        elif plan.stage_id == "II":
            total, report = L.stage2_total(terms, w, step)
        elif plan.stage_id == "III":
            total, report = L.stage3_total(_with_zero(terms, "gan", "perc"), w, lam_gan or 0.0, step)
        else:
            total, report = L.single_total(
                _with_zero(terms, "piv", "gan", "perc"), w, lam_piv or 0.0, lam_gan or 0.0, step
            )

        if self.opt is not None and total.requires_grad:
            self.opt.zero_grad(set_to_none=True)
            total.backward()
            if self.optim.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(self.gen_params, self.optim.grad_clip)
            self.opt.step()

        if self.train_disc:
            disc.requires_grad_(True)
            d_loss = L.gan_discriminator_loss(disc, x, out.x_hat)
            if not _all_finite(d_loss):
                raise NumericError("non-finite discriminator loss", stage=plan.stage_id, step=step, term="disc")
            self.disc_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            if self.optim.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(disc.parameters(), self.optim.grad_clip)
            self.disc_opt.step()
            report.extras["disc"] = float(d_loss.detach())

        report.extras["lr"] = lr
        state.step += 1
        state.history.append(report)
        return report


def _with_zero(terms, *names):
    """Fill absent optional terms with zeros so the stage formula stays total."""
    out = dict(terms)
    for n in names:
        out.setdefault(n, torch.zeros(()))
    return out


def epoch_batches(n: int, batch_size: int, seed: int, stage: str, epoch: int):
    """Index batches for one epoch; order is a pure function of (seed, stage, epoch)."""
    perm = torch.randperm(n, generator=generator(seed, "data", stage, epoch))
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train_stage(
    bundle: ModelBundle,
    plan: StagePlan,
    optim: OptimConfig,
    images: torch.Tensor,
    seed: int,
    feature_net: Optional[L.PerceptualNet] = None,
    on_step: Optional[Callable[[L.LossReport, TrainState], None]] = None,
) -> TrainState:
    """Run every step of one stage on ``images`` (an ``(N, C, H, W)`` tensor)."""
    n = images.shape[0]
    spe = steps_per_epoch(n, optim.batch_size)
    state = TrainState(seed=seed, stage=plan.stage_id)
    trainer = StageTrainer(bundle, plan, optim, state, spe, feature_net)
    while state.step < trainer.total_steps:
        for idx in epoch_batches(n, optim.batch_size, seed, plan.stage_id, state.epoch):
            if state.step >= trainer.total_steps:
                break
            report = trainer.train_step(images[idx])
            if on_step is not None:
                on_step(report, state)
        state.epoch += 1
    return state


def run_training(
    arch: ArchConfig,
    plans: Sequence[StagePlan],
    optim: OptimConfig,
    images: torch.Tensor,
    seed: int,
    out_dir,
    start_stage: Optional[str] = None,
    resume_from=None,
    bundle: Optional[ModelBundle] = None,
    on_step: Optional[Callable] = None,
    on_stage_end: Optional[Callable] = None,
) -> List[CheckpointManifest]:
    """Train ``plans`` in order, checkpointing to ``out_dir/stageN/checkpoint``.

    With ``start_stage`` set, earlier plans are skipped and the bundle is
    loaded from the previous stage's checkpoint (``resume_from`` or the
    previous stage directory under ``out_dir``). A missing checkpoint is an
    error rather than a silent restart.
    """
    out_dir = Path(out_dir)
    ids = [p.stage_id for p in plans]
    start = 0
    if start_stage is not None:
        if start_stage not in ids:
            raise ConfigError(f"start stage {start_stage!r} is not in the plan list {ids}")
        start = ids.index(start_stage)
    if start > 0:
        prev = ids[start - 1]
        ckpt = Path(resume_from) if resume_from else out_dir / STAGE_DIRS[prev] / "checkpoint"
        try:
            bundle, summary, manifest = load_checkpoint(ckpt, arch)
        except CheckpointError as exc:
            raise CheckpointError(f"cannot start at stage {start_stage}: {exc}") from exc
        if manifest.stage_id != prev:
            raise CheckpointError(f"checkpoint at {ckpt} is from stage {manifest.stage_id}, expected {prev}")
        if int(summary.get("seed", seed)) != seed:
            log.warning("resuming with seed %s over a checkpoint trained with seed %s", seed, summary.get("seed"))
    elif bundle is None:
        bundle = ModelBundle(arch, seed)

    feature_net = L.PerceptualNet(arch.channels)
    manifests = []
    for plan in plans[start:]:
        log.info("stage %s: %s", plan.stage_id, sorted(plan.trainable))
        state = train_stage(bundle, plan, optim, images, seed, feature_net, on_step)
        manifest = save_checkpoint(bundle, state, out_dir / STAGE_DIRS[plan.stage_id] / "checkpoint", plan.stage_id)
        manifests.append(manifest)
        if on_stage_end is not None:
            on_stage_end(bundle, plan, state, manifest)
    return manifests
