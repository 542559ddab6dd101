"""Plain ``key=value`` configuration files.

One assignment per line, ``#`` starts a comment, blank lines are ignored.
Values are coerced to the type of the matching dataclass field default.
"""

from __future__ import annotations

import dataclasses
import os
from typing import Any, Dict, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    """Raised for malformed config text or values that fail validation."""


def parse_kv(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, like: Any, key: str) -> Any:
    try:
        if isinstance(like, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            elem = like[0] if like else 0.0
            return tuple(_coerce(p, elem, key) for p in parts)
        if like is None:  # optional field: keep numbers numeric
            if value.lower() in ("", "none"):
                return None
            for kind in (int, float):
                try:
                    return kind(value)
                except ValueError:
                    pass
            return value
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(like).__name__}") from None


def from_kv(cls: Type[T], text: str, **overrides: Any) -> T:
    """Build dataclass ``cls`` from ``key=value`` text; unknown keys are errors."""
    values = parse_kv(text)
    fields = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    defaults = cls()  # type: ignore[call-arg]
    kwargs: Dict[str, Any] = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(raw, getattr(defaults, key), key)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def load(cls: Type[T], path: str | os.PathLike | None, **overrides: Any) -> T:
    text = ""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return from_kv(cls, text, **overrides)


def to_kv(obj: Any) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
