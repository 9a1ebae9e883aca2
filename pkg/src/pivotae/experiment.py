"""Experiment configuration: sectioned ``key = value`` text.

Example::

    [run]
    seed = 0

    [arch]
    preset = desk
    latent_dim = 16

    [data]
    root = synthetic:64

    [stage1]
    max_steps = 2000

Unknown sections or keys, unparsable values, and missing required sections
are rejected with the offending line number. Everything not given falls back
to the stage defaults (w_piv = 1, noise 0.8, w_kl = 0.001, ...).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional

from .arch import ArchConfig, desk_preset, reference_preset
from .data import DatasetSpec
from .errors import ConfigError
from .losses import LossWeights
from .probe import ProbeConfig
from .training import STAGE_IDS, OptimConfig, StagePlan, build_stage_plan

REQUIRED_SECTIONS = ("run", "data")
STAGE_SECTIONS = {"stage1": "I", "stage2": "II", "stage3": "III", "single": "single"}
PRESETS = {"desk": desk_preset, "reference": reference_preset}
MODES = ("staged", "single")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "staged"
    pretrained_encoder: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}")


@dataclass(frozen=True)
class EvalConfig:
    linear_probe: bool = True
    probe_dataset: str = "synthetic:256:1"
    probe_val_fraction: float = 0.25


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = RunConfig()
    arch_preset: str = "desk"
    arch: ArchConfig = ArchConfig()
    data: DatasetSpec = DatasetSpec("synthetic:64")
    optim: OptimConfig = OptimConfig()
    stages: Dict[str, StagePlan] = field(default_factory=lambda: {s: build_stage_plan(s) for s in STAGE_IDS})
    probe: ProbeConfig = ProbeConfig()
    eval: EvalConfig = EvalConfig()

    def plans(self):
        if self.run.mode == "single":
            return [self.stages["single"]]
        return [self.stages[s] for s in ("I", "II", "III")]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, seed=seed))

    def with_dataset(self, root: str) -> "ExperimentConfig":
        return replace(self, data=replace(self.data, root=root))


def _parse_value(raw: str, typ):
    origin = typing.get_origin(typ)
    if origin is typing.Union:  # Optional[X]
        if raw.lower() in ("", "none"):
            return None
        inner = [a for a in typing.get_args(typ) if a is not type(None)][0]
        return _parse_value(raw, inner)
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    raise ValueError(f"unsupported field type {typ}")


def _field_types(cls):
    return typing.get_type_hints(cls)


def _read_sections(text: str, source: str):
    sections: Dict[str, Dict[str, tuple]] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if current in sections:
                raise ConfigError(f"{source}:{lineno}: duplicate section [{current}]")
            sections[current] = {}
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if current is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any section")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value, lineno)
    return sections


_SECTION_SPECS = {
    "run": RunConfig,
    "data": DatasetSpec,
    "probe": ProbeConfig,
    "eval": EvalConfig,
}
_OPTIM_KEYS = {"peak_lr": float, "final_lr": float, "warmup_epochs": float, "beta1": float, "beta2": float,
               "weight_decay": float, "batch_size": int, "grad_clip": float}
_STAGE_KEYS = {"epochs": int, "max_steps": Optional[int], "noise_sigma": float, "bridge_active": bool,
               "pivot_variant": str, "grad_probe": str, "adaptive_piv": bool, "adaptive_gan": bool,
               "trainable": "groups"}
_STAGE_KEYS.update({f.name: float for f in fields(LossWeights)})


def _convert(section, entries, types, source):
    out = {}
    for key, (raw, lineno) in entries.items():
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        typ = types[key]
        try:
            if typ == "groups":
                out[key] = frozenset(g.strip() for g in raw.split(",") if g.strip())
            else:
                out[key] = _parse_value(raw, typ)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: [{section}] {key}: {exc}") from None
    return out


def _build(section, cls, values, entries, source, **extra):
    try:
        return cls(**extra, **values)
    except ConfigError as exc:
        line = min((ln for _, ln in entries.values()), default=0)
        raise ConfigError(f"{source}:{line}: [{section}] {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{source}: [{section}] {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    sections = _read_sections(text, source)
    known = set(_SECTION_SPECS) | {"arch", "optim"} | set(STAGE_SECTIONS)
    for name in sections:
        if name not in known:
            raise ConfigError(f"{source}: unknown section [{name}]")
    for name in REQUIRED_SECTIONS:
        if name not in sections:
            raise ConfigError(f"{source}: missing required section [{name}]")

    built = {}
    for name, cls in _SECTION_SPECS.items():
        entries = sections.get(name, {})
        types = _field_types(cls)
        if name == "data":
            types = {k: v for k, v in types.items() if k != "image_size"}
        values = _convert(name, entries, types, source)
        built[name] = values, entries

    arch_entries = sections.get("arch", {})
    arch_types = dict(_field_types(ArchConfig))
    arch_types["preset"] = str
    arch_values = _convert("arch", arch_entries, arch_types, source)
    preset = arch_values.pop("preset", "desk")
    if preset not in PRESETS:
        line = arch_entries["preset"][1]
        raise ConfigError(f"{source}:{line}: unknown arch preset {preset!r}; expected one of {sorted(PRESETS)}")
    try:
        arch = PRESETS[preset](**arch_values)
    except ConfigError as exc:
        line = min((ln for _, ln in arch_entries.values()), default=0)
        raise ConfigError(f"{source}:{line}: [arch] {exc}") from None

    optim_entries = sections.get("optim", {})
    ov = _convert("optim", optim_entries, _OPTIM_KEYS, source)
    base_optim = OptimConfig()
    betas = (ov.pop("beta1", base_optim.betas[0]), ov.pop("beta2", base_optim.betas[1]))
    optim = _build("optim", OptimConfig, ov, optim_entries, source, betas=betas)

    stages = {}
    for section, stage_id in STAGE_SECTIONS.items():
        entries = sections.get(section, {})
        values = _convert(section, entries, _STAGE_KEYS, source)
        try:
            stages[stage_id] = build_stage_plan(stage_id, **values)
        except ConfigError as exc:
            line = min((ln for _, ln in entries.values()), default=0)
            raise ConfigError(f"{source}:{line}: [{section}] {exc}") from None

    data_values, data_entries = built["data"]
    data = _build("data", DatasetSpec, data_values, data_entries, source, image_size=arch.image_size)
    return ExperimentConfig(
        run=_build("run", RunConfig, *built["run"], source),
        arch_preset=preset,
        arch=arch,
        data=data,
        optim=optim,
        stages=stages,
        probe=_build("probe", ProbeConfig, *built["probe"], source),
        eval=_build("eval", EvalConfig, *built["eval"], source),
    )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, frozenset):
        return ", ".join(sorted(value))
    return str(value)


def emit_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config text; ``parse_config_text(emit_config(c)) == c``."""
    out = []

    def section(name, items):
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in items)
        out.append("")

    section("run", [(f.name, getattr(cfg.run, f.name)) for f in fields(cfg.run)])
    section("arch", [("preset", cfg.arch_preset)] + list(cfg.arch.to_dict().items()))
    section("data", [(f.name, getattr(cfg.data, f.name)) for f in fields(cfg.data) if f.name != "image_size"])
    o = cfg.optim
    section("optim", [("peak_lr", o.peak_lr), ("final_lr", o.final_lr), ("warmup_epochs", o.warmup_epochs),
                      ("beta1", o.betas[0]), ("beta2", o.betas[1]), ("weight_decay", o.weight_decay),
                      ("batch_size", o.batch_size), ("grad_clip", o.grad_clip)])
    for sec, stage_id in STAGE_SECTIONS.items():
        p = cfg.stages[stage_id]
        items = [(k, getattr(p, k)) for k in _STAGE_KEYS if k in StagePlan.__dataclass_fields__]
        items += [(f.name, getattr(p.weights, f.name)) for f in fields(LossWeights)]
        section(sec, items)
    section("probe", [(f.name, getattr(cfg.probe, f.name)) for f in fields(cfg.probe)])
    section("eval", [(f.name, getattr(cfg.eval, f.name)) for f in fields(cfg.eval)])
    return "\n".join(out)
