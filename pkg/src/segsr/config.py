"""Experiment configuration: nested dataclasses loaded strictly from YAML.

Unknown keys and type errors are collected and reported together. Defaults
follow the published setup (k=6 hybrid units, LoRA rank 32 on attention and
FFN layers, Adam at 1e-4, batch 4, 64 px LR patches, 3:1 split).
"""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  {p}" for p in self.problems))


@dataclass
class LoraConfig:
    rank: int = 32
    targets: str = "attn+ffn"  # none | attn | attn+ffn


@dataclass
class EncoderConfig:
    kind: str = "stub"  # stub | pretrained
    weights: str | None = None  # safetensors container, required for kind=pretrained
    width: int = 64
    depth: int = 2
    heads: int = 2
    patch_size: int = 16
    grid: int = 14
    mlp_ratio: float = 4.0
    proj_dim: int = 0
    seed: int = 0
    lora: LoraConfig = field(default_factory=LoraConfig)


@dataclass
class ModelConfig:
    arch: str = "segsr"  # segsr | bicubic
    scale: int = 4
    channels: int = 60
    units: int = 6
    style: str = "hybrid_attention"  # residual | channel_attention | hybrid_attention
    total_blocks: int = 6
    inner_depth: int = 2
    window_size: int = 8
    heads: int = 4
    mlp_ratio: float = 2.0
    shift: bool = True
    reduction: int = 16
    res_scale: float = 1.0
    semantics: str = "full"  # none | sfem_add | sfem_lmm | full
    slm_variant: str = "full"  # full | unit_only | unit_global | unit_clip | global_clip
    slm_heads: int = 1
    modulation_kernel: int = 3
    shared_modulation: bool = True
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)


@dataclass
class DataConfig:
    root: str | None = None
    manifest: str | None = None
    ratio: list = field(default_factory=lambda: [3, 1])
    seed: int = 0


@dataclass
class TrainerConfig:
    total_iters: int = 80000
    milestones: list = field(default_factory=lambda: [50000])
    lr: float = 1e-4
    factor: float = 0.5
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    batch: int = 4
    patch: int = 64
    augment: bool = True
    grad_clip: float | None = None
    eval_every: int | None = None  # default: total_iters // 10
    eval_max_images: int | None = None
    checkpoint_every: int = 5000
    log_every: int = 1
    seed: int = 0
    out_dir: str = "runs/experiment"


@dataclass
class MetricsConfig:
    y_channel: bool = False
    lpips: bool = False
    clipscore: bool = False
    class_balanced: bool = False


@dataclass
class ExperimentConfig:
    name: str = "segsr"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def validate(self):
        problems = []
        m, t = self.model, self.trainer
        choices = {
            "model.arch": (m.arch, ("segsr", "bicubic")),
            "model.style": (m.style, ("residual", "channel_attention", "hybrid_attention")),
            "model.semantics": (m.semantics, ("none", "sfem_add", "sfem_lmm", "full")),
            "model.slm_variant": (m.slm_variant, ("full", "unit_only", "unit_global", "unit_clip", "global_clip")),
            "model.encoder.kind": (m.encoder.kind, ("stub", "pretrained")),
            "model.encoder.lora.targets": (m.encoder.lora.targets, ("none", "attn", "attn+ffn")),
        }
        for key, (value, allowed) in choices.items():
            if value not in allowed:
                problems.append(f"{key}: {value!r} not in {list(allowed)}")
        if m.scale not in (2, 3, 4):
            problems.append(f"model.scale: {m.scale} not in [2, 3, 4]")
        if m.units < 1 or m.total_blocks % max(m.units, 1):
            problems.append(f"model.total_blocks: {m.total_blocks} not divisible by model.units {m.units}")
        if m.encoder.kind == "pretrained" and not m.encoder.weights:
            problems.append("model.encoder.weights: required when model.encoder.kind is 'pretrained'")
        ms = list(t.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            problems.append(f"trainer.milestones: {ms} not strictly increasing")
        if ms and ms[-1] >= t.total_iters:
            problems.append(f"trainer.milestones: {ms[-1]} not below trainer.total_iters {t.total_iters}")
        if t.total_iters < 1:
            problems.append("trainer.total_iters: must be >= 1")
        if len(self.data.ratio) != 2:
            problems.append(f"data.ratio: expected [train, test], got {self.data.ratio}")
        if problems:
            raise ConfigError(problems)
        return self


def _type_ok(value, tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, a) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is list:
        return isinstance(value, (list, tuple))
    return isinstance(value, tp)


def _build(cls, data, prefix, problems):
    if not isinstance(data, dict):
        problems.append(f"{prefix or '<root>'}: expected a mapping, got {type(data).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            problems.append(f"{prefix}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        tp = hints[f.name]
        value = data[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, value, f"{prefix}{f.name}.", problems)
        elif _type_ok(value, tp):
            kwargs[f.name] = float(value) if tp is float else (list(value) if tp is list else value)
        else:
            problems.append(f"{prefix}{f.name}: {value!r} is not of type {getattr(tp, '__name__', tp)}")
    return cls(**kwargs)


def config_from_dict(data) -> ExperimentConfig:
    problems = []
    cfg = _build(ExperimentConfig, data or {}, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg.validate()


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected key=value"])
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {key}: {p} is not a section"])
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        data = yaml.safe_load(path.read_text()) or {}
    return config_from_dict(apply_overrides(data, overrides))


def describe_keys(cls=ExperimentConfig, prefix="") -> list[str]:
    """One ``key (type, default)`` line per leaf config key, for ``--help`` output."""
    lines = []
    hints = typing.get_type_hints(cls)
    default = cls()
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            lines += describe_keys(tp, f"{prefix}{f.name}.")
        else:
            name = getattr(tp, "__name__", str(tp).replace("typing.", ""))
            lines.append(f"{prefix}{f.name} ({name}, default {getattr(default, f.name)!r})")
    return lines


def home_dir() -> Path:
    """Cache/weights directory, from ``SEGSR_HOME`` (default ``~/.cache/segsr``)."""
    return Path(os.environ.get("SEGSR_HOME", Path.home() / ".cache" / "segsr"))


def resolve_weights(path) -> Path:
    p = Path(path)
    if not p.is_absolute() and not p.exists():
        candidate = home_dir() / p
        if candidate.exists():
            return candidate
    return p
