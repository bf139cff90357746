"""Plain-text ``key = value`` config files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {n} is not of the form key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(raw.strip(), f"line {n} has an empty key")
        out[key] = value
    return out


def _convert(key, value: str, tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("", "none"):
            return None
        return _convert(key, value, args[0])
    try:
        if tp is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
        if tp is list or origin is list:
            return [v.strip() for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(key, f"unsupported field type {tp}")


def from_mapping(cls, mapping: dict[str, str], **overrides):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in names:
            raise ConfigError(key, f"unknown key for {cls.__name__}")
        kwargs[key] = _convert(key, value, hints[key])
    kwargs.update(overrides)
    return cls(**kwargs)


def load(cls, path, **overrides):
    return from_mapping(cls, parse_kv(Path(path).read_text()), **overrides)


def dump(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (list, tuple)):
            v = ", ".join(":".join(x) if isinstance(x, (list, tuple)) else str(x) for x in v)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
