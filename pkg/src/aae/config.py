"""``key = value`` config files mapped onto :class:`TrainConfig`."""

from __future__ import annotations

import typing
from dataclasses import fields
from pathlib import Path

from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key or unparsable value in a config file or override."""


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types() -> dict[str, object]:
    hints = typing.get_type_hints(TrainConfig)
    return {f.name: hints[f.name] for f in fields(TrainConfig)}


def coerce(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    tp = types[key]
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp == (int | None) or tp == typing.Optional[int]:
            return None if text.lower() in ("", "none", "auto") else int(text)
        if typing.get_origin(tp) is tuple:
            return tuple(sorted(p.strip() for p in text.split(",") if p.strip()))
        return text
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for config key {key!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    values: dict[str, object] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    for key, raw in (overrides or {}).items():
        values[key] = coerce(key, raw)
    return TrainConfig(**values)


def format_config(config: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(v)
        elif isinstance(v, bool):
            v = str(v).lower()
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
