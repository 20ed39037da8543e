"""Run configuration: one TOML file, typed sections, dotted overrides.

Every section maps onto a dataclass. Unknown sections or keys are
rejected with the offending line number; :func:`dumps` writes a file that
:func:`loads` reads back to an equal config, and :func:`config_hash` is the
SHA-256 of that canonical text.
"""
from __future__ import annotations

import hashlib
import math
import re
import sys
from dataclasses import dataclass, field as dc_field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import DynamicsConfig
from .field import FieldConfig
from .losses import LossWeights, RewardWeights
from .policy import DeltaConfig, PolicyConfig
from .trainer import TrainConfig
from .world import ObsConfig, TrackConfig

__all__ = [
    "ConfigError",
    "TargetConfig",
    "FitConfig",
    "IOConfig",
    "RunConfig",
    "load",
    "loads",
    "dumps",
    "apply_overrides",
    "config_hash",
    "ABLATIONS",
    "apply_ablation",
]


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where = f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())


@dataclass
class TargetConfig:
    """Perturbations of the plant used as the 'real' target dynamics."""

    action_bias: tuple = (0.0, 0.0, 0.0)
    mass_scale: float = 1.0
    extra_drag: float = 0.0
    extra_lag: float = 0.0

    def __post_init__(self):
        self.action_bias = tuple(float(x) for x in self.action_bias)
        if len(self.action_bias) != 3:
            raise ValueError("action_bias must have 3 components")
        if self.mass_scale <= 0:
            raise ValueError("mass_scale must be positive")


@dataclass
class FitConfig:
    """Delta-model data collection and fitting."""

    episodes: int = 8
    horizon: int = 150
    window: int = 90
    epochs: int = 300
    lr: float = 1e-2
    pos_weight: float = 1.0
    vel_weight: float = 0.5
    grad_clip: float = 5.0
    finetune_iterations: int = 40
    finetune_avf: bool = True


@dataclass
class IOConfig:
    out_dir: str = "runs"
    figures: bool = True


_SECTIONS = {
    "dynamics": DynamicsConfig,
    "field": FieldConfig,
    "loss": LossWeights,
    "reward": RewardWeights,
    "train": TrainConfig,
    "track": TrackConfig,
    "target": TargetConfig,
    "policy": PolicyConfig,
    "delta": DeltaConfig,
    "fit": FitConfig,
    "obs": ObsConfig,
    "io": IOConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    dynamics: DynamicsConfig = dc_field(default_factory=DynamicsConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    loss: LossWeights = dc_field(default_factory=LossWeights)
    reward: RewardWeights = dc_field(default_factory=RewardWeights)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    track: TrackConfig = dc_field(default_factory=TrackConfig)
    target: TargetConfig = dc_field(default_factory=TargetConfig)
    policy: PolicyConfig = dc_field(default_factory=PolicyConfig)
    delta: DeltaConfig = dc_field(default_factory=DeltaConfig)
    fit: FitConfig = dc_field(default_factory=FitConfig)
    obs: ObsConfig = dc_field(default_factory=ObsConfig)
    io: IOConfig = dc_field(default_factory=IOConfig)

    def replace(self, **sections) -> "RunConfig":
        return replace(self, **sections)


def _key_line(text: str, section: str | None, key: str) -> int | None:
    """Line of ``key`` (inside ``[section]`` when given)."""
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.\-]+)\s*\]", line)
        if m:
            current = m.group(1)
            if section is not None and key is None and current == section:
                return i
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return i
    return None


def _coerce(value: Any, default: Any, name: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{name}: expected an array, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{name}: expected a string, got {value!r}")
        return value
    return value  # None defaults accept anything TOML can express


def _build_section(cls, table: dict, section: str, text: str, source: str | None):
    base = cls()
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in [{section}] (known: {', '.join(sorted(known))})",
                              _key_line(text, section, key), source)
        try:
            kwargs[key] = _coerce(value, known[key], f"{section}.{key}")
        except ValueError as exc:
            raise ConfigError(str(exc), _key_line(text, section, key), source) from None
    try:
        return cls(**{**known, **kwargs})
    except (ValueError, TypeError) as exc:
        line = _key_line(text, section, next(iter(table), None)) if table else _key_line(text, section, None)
        raise ConfigError(f"[{section}]: {exc}", line, source) from None


def loads(text: str, source: str | None = None) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed config: {exc}", int(m.group(1)) if m else None, source) from None
    kwargs = {}
    for key, value in data.items():
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"seed must be an integer, got {value!r}", _key_line(text, None, "seed"), source)
            kwargs["seed"] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a table", _key_line(text, None, key), source)
            kwargs[key] = _build_section(_SECTIONS[key], value, key, text, source)
        else:
            line = _key_line(text, None, key)
            if line is None:
                for i, raw in enumerate(text.splitlines(), 1):
                    if re.match(rf"^\[\s*{re.escape(key)}\s*\]", raw.strip()):
                        line = i
                        break
            raise ConfigError(f"unknown section or key '{key}' (sections: {', '.join(_SECTIONS)})", line, source)
    return RunConfig(**kwargs)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, str(path)) from None
    return loads(text, str(path))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def dumps(cfg: RunConfig) -> str:
    """Canonical TOML text. ``None`` values are omitted (they are defaults)."""
    lines = [f"seed = {cfg.seed}"]
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append("")
        lines.append(f"[{name}]")
        for f in fields(section):
            value = getattr(section, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings (values in TOML syntax)."""
    text = dumps(cfg)
    data = tomllib.loads(text)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        path, raw = item.split("=", 1)
        path = path.strip()
        try:
            value = tomllib.loads(f"v = {raw.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw.strip()  # bare strings need no quotes on the command line
        if path == "seed":
            data["seed"] = value
            continue
        if "." not in path:
            raise ConfigError(f"override {item!r}: expected section.key")
        section, key = path.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section '{section}'")
        data.setdefault(section, {})[key] = value
    # re-validate through the loader
    lines = [f"seed = {_fmt(data['seed'])}"]
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for k, v in data.get(name, {}).items():
            lines.append(f"{k} = {_fmt(v)}")
    return loads("\n".join(lines) + "\n", "--set")


ABLATIONS = ("avf", "no-avf-lp", "no-avf-lpnorm", "scalar-proj")


def apply_ablation(cfg: RunConfig, arm: str) -> RunConfig:
    """Switch AVF, progress form and projection term for a training arm."""
    if arm not in ABLATIONS:
        raise ConfigError(f"unknown ablation {arm!r} (choose from {', '.join(ABLATIONS)})")
    train = replace(cfg.train, avf_enabled=(arm == "avf"))
    if arm == "avf":
        loss = replace(cfg.loss, progress="lp", use_projection=False)
    elif arm == "no-avf-lp":
        loss = replace(cfg.loss, progress="lp", use_projection=False)
    elif arm == "no-avf-lpnorm":
        loss = replace(cfg.loss, progress="lp_norm", use_projection=False)
    else:
        loss = replace(cfg.loss, progress="lp", use_projection=True, lambda_proj=3.0, beta_3=0.5)
    return replace(cfg, train=train, loss=loss)
