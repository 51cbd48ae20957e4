"""Flat ``key = value`` config files mapped onto the model and training dataclasses."""

from __future__ import annotations

import dataclasses
import os
import typing
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "CAMO_SEED"


class ConfigFileError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigFileError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    if path is None:
        return {}
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _coerce(value: str, hint, key: str):
    args = typing.get_args(hint)
    if args and type(None) in args:
        if value.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {value!r} as {hint.__name__}") from None
    return value


def build(cls, values: dict[str, str], **fixed):
    """Instantiate dataclass ``cls`` from the matching keys in ``values``."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            kwargs[f.name] = _coerce(values[f.name], hints[f.name], f.name)
    kwargs.update({k: v for k, v in fixed.items() if v is not None})
    return cls(**kwargs)


KNOWN_KEYS = (
    {f.name for f in dataclasses.fields(ModelConfig)}
    | {f.name for f in dataclasses.fields(TrainConfig)}
    | {"data", "iterations", "noise", "beam"}
)


def check_keys(values: dict[str, str]) -> None:
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigFileError(f"unknown config keys: {', '.join(unknown)}")


def resolve_seed(flag: int | None, values: dict[str, str]) -> int:
    """``--seed`` beats the config file, which beats ``$CAMO_SEED``; default 0."""
    if flag is not None:
        return flag
    if "seed" in values:
        return int(values["seed"])
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigFileError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0
