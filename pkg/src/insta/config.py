"""Experiment configuration: defaults, JSON loading, overrides, hashing.

The configuration is a nested document with sections ``dataset``,
``model``, ``training``, ``eval`` and ``ablation`` plus top-level ``seed``
and ``variant``. Unknown keys anywhere are a hard error so typos cannot
silently fall back to defaults. Overrides are dotted ``key=value`` pairs
(values parsed as JSON, bare strings allowed); environment variables use
the ``INSTA_`` prefix with ``__`` standing in for the dot.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .data import SyntheticTaskConfig

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainingConfig",
    "EvalConfig",
    "AblationConfig",
    "ExperimentConfig",
    "load_config",
    "config_to_dict",
    "config_from_dict",
    "config_hash",
    "ENV_PREFIX",
]

ENV_PREFIX = "INSTA_"


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad type, or bad value."""


@dataclass
class ModelConfig:
    channels: int = 32          # width of every backbone block
    generator_kernel: int = 3   # k of the dynamic kernels
    sigma: float = 0.2          # bottleneck ratio of the channel MLP
    freq_count: int = 16        # requested frequency groups (clipped to grid)
    encoder: str = "msa"        # "msa" or "gap"
    temperature: float = 64.0   # distance-to-logit scale
    generator_bias: bool = True
    generator_bn_affine: bool = True
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5


@dataclass
class TrainingConfig:
    episodes: int = 600
    way: int = 5
    shot: int = 5
    queries_per_class: int = 15
    lr: float = 0.01
    adapt_lr_multiplier: float = 25.0


@dataclass
class EvalConfig:
    episodes: int = 600
    way: int = 5
    shot: int = 5
    queries_per_class: int = 15


@dataclass
class AblationConfig:
    # Optional overrides so the nine-variant sweep can run lighter than a
    # single full training; None means "use the training/eval sections".
    train_episodes: int | None = None
    eval_episodes: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    variant: str = "ix"
    dataset: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


_TUPLE_FIELDS = {"image_size", "orientation_span", "frequency_span"}


def _coerce(name: str, value, default):
    """Coerce a JSON value onto the type of the dataclass default."""
    if name in _TUPLE_FIELDS:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return tuple(value)
    if default is None:  # optional integer fields (ablation overrides)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{name}: expected an integer or null, got {value!r}")
        return int(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{name}: unsupported config field type")


def _apply_section(obj, section: str, data: dict):
    known = {f.name for f in fields(obj)}
    defaults = type(obj)()
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(obj, key, _coerce(f"{section}.{key}", value, getattr(defaults, key)))


_SECTIONS = ("dataset", "model", "training", "eval", "ablation")


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    cfg = ExperimentConfig()
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be an object")
            _apply_section(getattr(cfg, key), key, value)
        elif key == "seed":
            cfg.seed = _coerce("seed", value, 0)
        elif key == "variant":
            cfg.variant = _coerce("variant", value, "ix")
        else:
            raise ConfigError(f"unknown key {key}")
    _validate(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = {"seed": cfg.seed, "variant": cfg.variant}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        entry = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            entry[f.name] = list(value) if isinstance(value, tuple) else value
        doc[section] = entry
    return doc


def _validate(cfg: ExperimentConfig) -> None:
    from .harness import VARIANTS  # local import to avoid a cycle

    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}; choose from {sorted(VARIANTS)}")
    if cfg.model.encoder not in ("msa", "gap"):
        raise ConfigError(f"model.encoder must be 'msa' or 'gap', got {cfg.model.encoder!r}")
    if not 0 < cfg.model.sigma < 1:
        raise ConfigError("model.sigma must lie in (0,1)")
    if cfg.model.temperature <= 0:
        raise ConfigError("model.temperature must be positive")
    ch, height, width = cfg.dataset.image_size
    if height % 8 or width % 8:
        raise ConfigError("image height/width must be divisible by 8 (three 2x2 pools)")
    try:
        SyntheticTaskConfig(**{f.name: getattr(cfg.dataset, f.name) for f in fields(cfg.dataset)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for section, name in ((cfg.training, "training"), (cfg.eval, "eval")):
        if section.episodes < 0:
            raise ConfigError(f"{name}.episodes must be nonnegative")
        if min(section.way, section.shot, section.queries_per_class) < 1:
            raise ConfigError(f"{name}: way/shot/queries must be positive")


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings like msa


def _set_dotted(doc: dict, path: str, value) -> None:
    parts = path.split(".")
    if len(parts) == 1:
        doc[parts[0]] = value
        return
    if len(parts) != 2:
        raise ConfigError(f"override path {path!r} must be key or section.key")
    section, key = parts
    doc.setdefault(section, {})
    if not isinstance(doc[section], dict):
        raise ConfigError(f"cannot override inside non-section {section}")
    doc[section][key] = value


def _env_overrides(environ) -> list[tuple[str, object]]:
    found = []
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().replace("__", ".")
        found.append((path, _parse_override_value(raw)))
    return found


def load_config(path: str | None = None, overrides: list[str] | None = None,
                environ=None) -> ExperimentConfig:
    """Build the effective config: file < environment < explicit overrides."""
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    else:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")

    if environ is None:
        environ = os.environ
    for dotted, value in _env_overrides(environ):
        _set_dotted(doc, dotted, value)

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        _set_dotted(doc, dotted.strip(), _parse_override_value(raw.strip()))

    return config_from_dict(doc)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
