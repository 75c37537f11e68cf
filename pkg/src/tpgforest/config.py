"""Flat and sectioned key-value config documents.

A flat document is ``key = value`` lines; ``#`` and ``;`` start comments.
A sectioned document groups the same lines under ``[env]``, ``[evo]`` and
``[trainer]`` headers. Values are coerced to the dataclass field's type and
unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing

from .errors import ConfigError


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init}


def update_dataclass(obj, values: dict[str, str], section: str = ""):
    """Return a copy of ``obj`` with string ``values`` coerced and applied."""
    types = field_types(type(obj))
    changes = {}
    for key, raw in values.items():
        if key not in types:
            where = f"[{section}] " if section else ""
            raise ConfigError(f"{where}unknown key {key!r}")
        changes[key] = _coerce(key, raw, types[key])
    return dataclasses.replace(obj, **changes)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_flat(obj) -> str:
    return "".join(
        f"{f.name} = {format_value(getattr(obj, f.name))}\n"
        for f in dataclasses.fields(obj) if f.init
    )


def parse_flat(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_sections(text: str, allowed: typing.Iterable[str]) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"),
        delimiters=("=",),
    )
    parser.optionxform = str  # keys are case-sensitive (camelCase evolution parameters)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    allowed = set(allowed)
    sections = {}
    for name in parser.sections():
        if name not in allowed:
            raise ConfigError(f"unknown section [{name}]")
        sections[name] = dict(parser[name])
    return sections
