"""Flat ``key=value`` text configs for (possibly nested) dataclasses.

Nested dataclass fields are flattened with dotted keys (``schedule.max_lr``),
sequences are comma separated, and ``#`` starts a comment line.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from pathlib import Path
from typing import Any, Dict, Mapping

from mtclip.errors import ConfigError


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list, frozenset, set)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return ",".join(_format(v) for v in items)
    if isinstance(value, dict):
        return ",".join(f"{k}:{_format(v)}" for k, v in sorted(value.items()))
    return str(value)


def to_flat(obj, prefix: str = "") -> Dict[str, str]:
    flat: Dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            flat.update(to_flat(value, key + "."))
        else:
            flat[key] = _format(value)
    return flat


def dumps(obj) -> str:
    return "".join(f"{k}={v}\n" for k, v in to_flat(obj).items())


def digest(obj) -> bytes:
    """SHA-256 over the canonical ``key=value`` text."""
    return hashlib.sha256(dumps(obj).encode("utf-8")).digest()


def parse_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_file(path) -> Dict[str, str]:
    return parse_text(Path(path).read_text(encoding="utf-8"))


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union:
            inner = [a for a in args if a is not type(None)]
            if raw.lower() in ("none", ""):
                return None
            return _convert(raw, inner[0], key)
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin in (tuple, list, frozenset):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            elem = args[0] if args else str
            vals = [_convert(s, elem, key) for s in items]
            return origin(vals)
        if origin is dict:
            kt, vt = args
            out = {}
            for item in (s.strip() for s in raw.split(",") if s.strip()):
                k, v = item.split(":", 1)
                out[_convert(k.strip(), kt, key)] = _convert(v.strip(), vt, key)
            return out
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"field {key!r}: cannot parse {raw!r} as {tp}") from exc
    return raw


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def from_flat(cls, flat: Mapping[str, str], prefix: str = "", strict: bool = True, base=None):
    """Build ``cls`` from flat keys; unspecified fields keep their defaults.

    Nested dataclass fields start from the enclosing field's default (or from
    the matching field of ``base``), so only the listed keys change.
    """
    hints = typing.get_type_hints(cls)
    kwargs = {}
    known = set()
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            sub_keys = [k for k in flat if k.startswith(key + ".")]
            known.update(sub_keys)
            if sub_keys:
                start = getattr(base, f.name) if base is not None else _field_default(f)
                kwargs[f.name] = from_flat(tp, flat, key + ".", strict=False, base=start)
        elif key in flat:
            known.add(key)
            kwargs[f.name] = _convert(flat[key], tp, key)
    if strict and not prefix:
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)
