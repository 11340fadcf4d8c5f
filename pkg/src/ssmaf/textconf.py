"""Conversion between flat dataclasses and ``key = value`` text."""

from __future__ import annotations

import configparser
import enum
import typing
from dataclasses import fields, replace


def format_value(v) -> str:
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, typ):
    text = text.strip()
    origin = typing.get_origin(typ)
    if origin is tuple:
        args = typing.get_args(typ)
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(parse_value(p, a) for a, p in zip(args, parts))
    if isinstance(typ, type) and issubclass(typ, enum.Enum):
        return typ.parse(text) if hasattr(typ, "parse") else typ(text)
    if typ is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if typ is int:
        return int(text, 0)
    if typ is float:
        return float(text)
    return typ(text)


def to_mapping(obj) -> dict[str, str]:
    return {f.name: format_value(getattr(obj, f.name)) for f in fields(obj)}


def from_mapping(cls, mapping, base=None):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    values = {}
    for key, text in mapping.items():
        if key not in known:
            raise KeyError(f"unknown key {key!r} for {cls.__name__}")
        try:
            values[key] = parse_value(text, hints[key])
        except ValueError as exc:
            raise ValueError(f"{cls.__name__}.{key}: {exc}") from None
    return replace(base, **values) if base is not None else cls(**values)


def dump_sections(sections: dict[str, dict[str, str]]) -> str:
    lines = []
    for name, mapping in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in mapping.items())
        lines.append("")
    return "\n".join(lines)


def parse_sections(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    return {name: dict(parser[name]) for name in parser.sections()}
