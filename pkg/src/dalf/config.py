"""Plain-text ``key = value`` configuration files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def _coerce(value, typ):
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(typ)
    if typ is bool or typ == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ is int or typ == "int":
        return int(value)
    if typ is float or typ == "float":
        return float(value)
    if typ is tuple or origin is tuple or typ == "tuple":
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def apply_overrides(obj, values: dict, strict: bool = True):
    """Return a copy of dataclass ``obj`` with ``values`` (strings allowed) applied."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    hints = typing.get_type_hints(type(obj))
    changes = {}
    for key, value in values.items():
        if key not in fields:
            if strict:
                raise KeyError(f"unknown config key {key!r}")
            continue
        changes[key] = _coerce(value, hints.get(key, str))
    return dataclasses.replace(obj, **changes)


def dump_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, (tuple, list)):
            value = " ".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
