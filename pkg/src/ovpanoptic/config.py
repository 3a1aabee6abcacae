"""Run configuration.

A :class:`RunConfig` is a tree of dataclasses. Every key has a default and
unknown keys are rejected on load. Files are YAML mappings whose nesting
mirrors the dataclass tree; ``--set key.path=value`` style overrides are
applied with :func:`apply_overrides`.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SEED_ENV_VAR = "ODISE_TOY_SEED"


class ConfigError(ValueError):
    """Raised for malformed configuration files or overrides."""


@dataclass
class DataConfig:
    num_images: int = 16
    image_size: int = 64
    things: list[str] = field(default_factory=lambda: ["square", "circle", "triangle", "diamond"])
    stuff: list[str] = field(default_factory=lambda: ["grass", "sky"])
    min_things: int = 1
    max_things: int = 3
    min_size: int = 16
    max_size: int = 26
    max_stuff: int = 1
    path: str | None = None


@dataclass
class TextConfig:
    dim: int = 64
    context_length: int = 16
    layers: int = 2
    heads: int = 4
    vocab_size: int = 4096
    seed: int = 1001


@dataclass
class ImageEncoderConfig:
    dim: int = 64
    width: int = 32
    stride: int = 8
    seed: int = 1002


@dataclass
class ScheduleConfig:
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    steps: int = 1000


@dataclass
class UNetConfig:
    base_width: int = 32
    channel_mult: list[int] = field(default_factory=lambda: [1, 2, 2])
    stem_stride: int = 2
    time_dim: int = 64
    heads: int = 4
    seed: int = 1003
    checkpoint: str | None = None


@dataclass
class PyramidConfig:
    taps: list[int] = field(default_factory=lambda: [3, 4, 5])
    strides: list[int] = field(default_factory=lambda: [8, 4, 2])
    channels: int = 64
    seed: int = 1004


@dataclass
class CaptionerConfig:
    mode: str = "implicit"
    pseudo_tokens: int = 8
    hidden_dim: int = 128


@dataclass
class CostConfig:
    bce: float = 1.0
    dice: float = 1.0


@dataclass
class MaskConfig:
    num_queries: int = 20
    decoder_layers: int = 3
    hidden_dim: int = 64
    heads: int = 4
    mask_stride: int = 2
    threshold: float = 0.5
    cost: CostConfig = field(default_factory=CostConfig)
    loss: CostConfig = field(default_factory=CostConfig)


@dataclass
class ClassifierConfig:
    tau_init: float = 0.07
    null_category: bool = True
    null_weight: float = 0.1
    weight: float = 1.0


@dataclass
class GroundingConfig:
    tau_init: float = 0.07
    k_word: int = 8
    weight: float = 1.0


@dataclass
class InferConfig:
    # `lambda` is a Python keyword; the file key is still `infer.lambda`.
    lam: float = 0.65
    conf_thresh: float = 0.25
    reject_thresh: float = 0.5
    overlap_keep: float = 0.8
    min_area: int = 16
    top_k: int = 100
    disc_tau: float = 0.07


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    milestones: list[float] = field(default_factory=lambda: [0.9, 0.955])
    gamma: float = 0.1
    batch_size: int = 8
    iterations: int = 2000
    clip_norm: float = 1.0


@dataclass
class LogConfig:
    every: int = 50
    eval_every: int = 0
    checkpoint_every: int = 0
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    supervision: str = "label"
    dtype: str = "float32"
    timesteps: list[int] = field(default_factory=lambda: [0])
    templates: list[str] | None = None
    data: DataConfig = field(default_factory=DataConfig)
    text: TextConfig = field(default_factory=TextConfig)
    image_encoder: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    captioner: CaptionerConfig = field(default_factory=CaptionerConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    cls: ClassifierConfig = field(default_factory=ClassifierConfig)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    log: LogConfig = field(default_factory=LogConfig)

    def validate(self) -> "RunConfig":
        if self.supervision not in ("label", "caption"):
            raise ConfigError(f"supervision must be 'label' or 'caption', got {self.supervision!r}")
        if self.captioner.mode not in ("implicit", "empty"):
            raise ConfigError(f"captioner.mode must be 'implicit' or 'empty', got {self.captioner.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        steps = self.timesteps
        # Non-decreasing rather than strictly increasing: [0, 0] duplicates channels.
        if not steps or any(b < a for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"timesteps must be non-empty and sorted, got {steps}")
        if any(t < 0 or t > self.schedule.steps for t in steps):
            raise ConfigError(f"timesteps must lie in [0, {self.schedule.steps}]")
        if not 0.0 <= self.infer.lam <= 1.0:
            raise ConfigError("infer.lambda must lie in [0, 1]")
        if len(self.pyramid.taps) != len(self.pyramid.strides):
            raise ConfigError("pyramid.taps and pyramid.strides must have equal length")
        if len(self.data.things) < 2 or len(self.data.stuff) < 1:
            raise ConfigError("need at least 2 thing and 1 stuff categories")
        if self.optim.iterations < 0 or self.optim.batch_size < 1:
            raise ConfigError("optim.iterations must be >= 0 and optim.batch_size >= 1")
        return self

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


_FILE_KEY_ALIASES = {"lambda": "lam"}
_REVERSE_ALIASES = {v: k for k, v in _FILE_KEY_ALIASES.items()}


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {
            _REVERSE_ALIASES.get(f.name, f.name): _to_plain(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
        }
    if isinstance(obj, list):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls: type, values: dict[str, Any], prefix: str) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    instance = cls()
    for raw_key, value in values.items():
        key = _FILE_KEY_ALIASES.get(raw_key, raw_key)
        if key not in fields:
            raise ConfigError(f"unknown config key: {prefix}{raw_key}")
        current = getattr(instance, key)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value, f"{prefix}{raw_key}.")
        else:
            value = _coerce(value, current, f"{prefix}{raw_key}")
        setattr(instance, key, value)
    return instance


def _coerce(value: Any, default: Any, key: str) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def config_from_dict(values: dict[str, Any] | None) -> RunConfig:
    return _build(RunConfig, values or {}, "").validate()


def apply_overrides(config: RunConfig, overrides: list[str] | None) -> RunConfig:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars."""
    if not overrides:
        return config
    tree = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = tree
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config key: {path}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key: {path}")
        try:
            node[keys[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {item!r}: {exc}") from exc
    return config_from_dict(tree)


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None,
                environ: dict[str, str] | None = None) -> RunConfig:
    """Load a config file, apply overrides, then the seed environment variable."""
    values: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values = loaded
    config = apply_overrides(config_from_dict(values), overrides)
    env = os.environ if environ is None else environ
    if SEED_ENV_VAR in env:
        try:
            config = copy.deepcopy(config)
            config.seed = int(env[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
    return config


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
