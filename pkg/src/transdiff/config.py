"""INI-style run configuration.

Four optional sections map onto the config dataclasses::

    [model]     preset = toy, then any ModelConfig field (h, w, d, f, enc_width, ...)
    [data]      SyntheticDatasetSpec fields (n_classes, noise_std, seed, ...)
    [train]     TrainConfig fields; lr = auto picks the phase default
    [sampler]   SamplerConfig fields (steps, mode, s1, s2, sigma_base, ...)

Every key has a default; unknown sections or keys raise ConfigError.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticDatasetSpec
from .model import PRESETS, ModelConfig
from .sampler import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


_SECTIONS = {"model": ModelConfig, "data": SyntheticDatasetSpec, "train": TrainConfig, "sampler": SamplerConfig}


def _coerce(raw: str, hint, key: str):
    raw = raw.strip()
    optional = typing.get_origin(hint) is typing.Union and type(None) in typing.get_args(hint)
    if optional:
        if raw.lower() in ("auto", "none", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from None
    return raw


def _build(cls, values: dict[str, str], section: str, base: dict | None = None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = dict(base or {})
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = _coerce(raw, hints[key], f"{section}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        values = dict(parser[name]) if parser.has_section(name) else {}
        base = None
        if name == "model" and "preset" in values:
            preset_name = values.pop("preset").strip()
            if preset_name not in PRESETS:
                raise ConfigError(f"unknown preset {preset_name!r}")
            base = dict(PRESETS[preset_name])
        parts[name] = _build(cls, values, name, base)
    return RunConfig(**parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """Render a RunConfig back to the INI form accepted by :func:`parse_config`."""
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {'auto' if value is None else value}")
        lines.append("")
    return "\n".join(lines)
