"""Flat ``key=value`` config files.

One assignment per line, ``#`` starts a comment. Keys are namespaced by the
dataclass they address (``data.``, ``vq.``, ``vit.``, ``train.``). Tuples are
written comma-separated, booleans as true/false.
"""
from __future__ import annotations

import dataclasses
import typing
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_kv(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), str(path))


def _coerce(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if raw.lower() in ("", "none", "null"):
            return None
        non_none = [a for a in args if a is not type(None)]
        return _coerce(non_none[0], raw, key)
    if origin is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        inner = args[0] if args else str
        return tuple(_coerce(inner, p, key) for p in parts)
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {tp.__name__}, got {raw!r}") from None
    return raw


def coerce_dataclass(cls, values: Mapping[str, Any], base=None):
    """Build ``cls`` from string values, starting from ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    current = dataclasses.asdict(base) if base is not None else {}
    for k, v in values.items():
        current[k] = _coerce(hints[k], v, k) if isinstance(v, str) else v
    try:
        return cls(**current)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def split_sections(values: Mapping[str, str], sections: typing.Iterable[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {s: {} for s in sections}
    for key, value in values.items():
        if "." not in key:
            raise ConfigError(f"config key {key!r} needs a section prefix ({', '.join(out)})")
        sec, name = key.split(".", 1)
        if sec not in out:
            raise ConfigError(f"unknown config section {sec!r} in key {key!r}")
        out[sec][name] = value
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def dump_kv(sections: Mapping[str, Any]) -> str:
    lines = []
    for sec, obj in sections.items():
        for f in dataclasses.fields(obj):
            lines.append(f"{sec}.{f.name}={format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
