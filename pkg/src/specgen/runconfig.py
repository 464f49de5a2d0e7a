"""Plain-text run configuration: ``key = value`` lines under ``[section]``
headers, validated against a schema (unknown sections or keys are rejected so
typos cannot be silently absorbed), overridable by command-line flags.

Every command writes its fully resolved configuration next to its outputs;
that sidecar plus the referenced data paths reproduce the run.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


_CONVERTERS = {int: int, float: float, str: str, bool: _parse_bool}


def parse_text(text: str) -> dict:
    """Raw section -> {key: string} mapping from config text."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def resolve(schema: dict, text: str = "", overrides: dict | None = None) -> dict:
    """Defaults from ``schema``, updated by config text, then by overrides.

    ``schema`` maps section -> key -> (type, default). ``overrides`` maps
    (section, key) -> value (already typed or string). Unknown sections or
    keys in either source raise ConfigError naming the offender.
    """
    resolved = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in schema.items()}

    def convert(sec, key, value):
        if sec not in schema:
            raise ConfigError(f"unknown config section [{sec}]")
        if key not in schema[sec]:
            raise ConfigError(f"unknown key {key!r} in section [{sec}]")
        typ = schema[sec][key][0]
        if isinstance(value, str):
            try:
                return _CONVERTERS[typ](value)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"[{sec}] {key}: cannot parse {value!r} as {typ.__name__}") from exc
        return typ(value) if typ is not bool else bool(value)

    for sec, keys in parse_text(text).items():
        for key, value in keys.items():
            resolved.setdefault(sec, {})
            resolved[sec][key] = convert(sec, key, value)
    for (sec, key), value in (overrides or {}).items():
        if value is None:
            continue
        resolved[sec][key] = convert(sec, key, value)
    return resolved


def load_file(path) -> str:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return p.read_text()


def to_text(resolved: dict) -> str:
    """Stable serialization (sorted sections and keys) of a resolved config."""
    out = io.StringIO()
    for sec in sorted(resolved):
        out.write(f"[{sec}]\n")
        for key in sorted(resolved[sec]):
            value = resolved[sec][key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = f"{value:.10g}"
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()
