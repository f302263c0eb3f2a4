"""Flat ``key = value`` config files mirroring ModelConfig and TrainConfig fields."""
from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse lines of ``key = value``; ``#`` starts a comment. Values stay strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, kind, key: str):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    try:
        if kind is bool:
            low = value.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot read {value!r} as {kind.__name__}") from None
    return value


def build(cls, values: dict, require_all: bool = True):
    """Instantiate dataclass ``cls`` from string ``values`` restricted to its fields."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            if require_all:
                raise ConfigError(f"missing config key {f.name!r}")
            continue
        kwargs[f.name] = _coerce(values[f.name], f.type, f.name)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_configs(path, *classes):
    """Read ``path`` and return one instance per dataclass in ``classes``.

    Every field of every class must be present; keys belonging to none of
    them are rejected.
    """
    path = Path(path)
    values = parse_config_text(path.read_text(), str(path))
    known = {f.name for cls in classes for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s) {', '.join(map(repr, unknown))}")
    return tuple(build(cls, values) for cls in classes)


def format_config(*objs) -> str:
    lines = []
    for obj in objs:
        lines.append(f"# {type(obj).__name__}")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
