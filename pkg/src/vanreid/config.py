"""Run configuration: one JSON file, nested sections, flag overrides.

Every field has a default, so an empty config is a valid run. Unknown keys
are a hard error with the offending path in the message; the CLI maps
ConfigError to exit code 2.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .data import DataConfig

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "TextureConfig",
    "EvalConfig",
    "RunConfig",
    "run_config_from_dict",
    "apply_override",
    "load_run_config",
    "run_config_to_dict",
]


class ConfigError(ValueError):
    """Bad configuration input; carries a path/field diagnostic."""


@dataclass(frozen=True)
class ModelConfig:
    """Backbone widths and where the two streams exchange attention."""

    stage_channels: tuple = (16, 32, 64, 128)
    heads: int = 4
    mlp_ratio: int = 2
    fusion_stages: tuple = (3, 4)
    class_token: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "fusion_stages", tuple(self.fusion_stages))
        if not self.stage_channels:
            raise ValueError("stage_channels must be nonempty")
        if self.heads < 1 or self.mlp_ratio < 1:
            raise ValueError("heads and mlp_ratio must be positive")
        if self.stage_channels[-1] % self.heads:
            raise ValueError(
                f"heads ({self.heads}) must divide the last stage width "
                f"({self.stage_channels[-1]})")


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and batch layout. lr(e) = base_lr / 10^(#drops <= e)."""

    epochs: int = 120
    base_lr: float = 1e-4
    lr_drop_epochs: tuple = (40, 90)
    momentum: float = 0.9
    p_identities: int = 4
    k_instances: int = 4
    margin: float = 0.3
    flip: bool = True
    color_jitter: float = 0.1
    log_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(self.lr_drop_epochs))
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.p_identities < 2 or self.k_instances < 2:
            raise ValueError("batches need >= 2 identities and >= 2 instances each")
        if self.margin < 0 or self.color_jitter < 0:
            raise ValueError("margin and color_jitter must be nonnegative")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")


@dataclass(frozen=True)
class TextureConfig:
    """Texture predictor: hinge margin tau, output side T, and its own loop."""

    tau: float = 0.3
    size: int = 64
    distance_depth: int = 2
    steps: int = 300
    lr: float = 0.01
    styles_per_step: int = 1

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be nonnegative, got {self.tau}")
        if self.size < 4 or self.size & (self.size - 1):
            raise ValueError(f"size must be a power of two >= 4, got {self.size}")
        if self.steps < 0 or self.lr <= 0:
            raise ValueError("steps must be nonnegative and lr positive")
        if self.distance_depth < 1:
            raise ValueError("distance_depth must be positive")


@dataclass(frozen=True)
class EvalConfig:
    normalize: bool = False
    batch_size: int = 16
    dump_descriptors: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    texture: TextureConfig = TextureConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "texture": TextureConfig,
    "eval": EvalConfig,
}


def _coerce(path: str, default, value):
    """Check a raw JSON value against the field's default-derived type."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build_section(name: str, cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {raw!r}")
    fields = {f.name: f.default for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key '{name}.{unknown[0]}'")
    coerced = {k: _coerce(f"{name}.{k}", fields[k], v) for k, v in raw.items()}
    try:
        return cls(**coerced)
    except ValueError as err:
        raise ConfigError(f"{name}: {err}") from err


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {raw!r}")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    kwargs = {name: _build_section(name, cls, raw.get(name, {}))
              for name, cls in _SECTIONS.items()}
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a nonnegative integer, got {seed!r}")
    return RunConfig(seed=seed, **kwargs)


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply one `path.to.field=value` onto the raw config dict."""
    path, sep, text = assignment.partition("=")
    if not sep or not path:
        raise ConfigError(f"--set needs path.to.field=value, got '{assignment}'")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    keys = path.split(".")
    node = raw
    for key in keys[:-1]:
        nxt = node.setdefault(key, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {path}: '{key}' is not a section")
        node = nxt
    node[keys[-1]] = value
    return raw


def load_run_config(path=None, overrides=(), seed=None) -> RunConfig:
    """Resolve file + overrides + seed flag into a validated RunConfig."""
    if path is None:
        raw: dict = {}
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{p}: invalid JSON at line {err.lineno}: {err.msg}") from err
    for assignment in overrides:
        apply_override(raw, assignment)
    if seed is not None:
        raw["seed"] = seed
    return run_config_from_dict(raw)


def run_config_to_dict(cfg: RunConfig) -> dict:
    out = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
    for section in out.values():
        for k, v in section.items():
            if isinstance(v, tuple):
                section[k] = list(v)
    out["seed"] = cfg.seed
    return out
