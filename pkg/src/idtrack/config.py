"""Flat ``key = value`` config files and coercion into dataclasses.

Lines look like ``lambda_occ = 0.5``; ``#`` starts a comment. Tuple and
list values are comma separated (``interval_range = 1, 4``).
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_flat_config(text: str, source: str = "<string>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}", "empty key")
        values[key] = value
    return values


def read_flat_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    return parse_flat_config(text, source=str(path))


def format_flat_config(values: Mapping[str, Any]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _coerce_scalar(key: str, value: str, kind: type) -> Any:
    if kind is bool:
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if kind is type(None):
        if value.lower() in {"", "none", "null"}:
            return None
        raise ConfigError(key, f"expected none, got {value!r}")
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}") from None


def _coerce(key: str, value: str, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value.lower() in {"none", "null", ""} and type(None) in args:
            return None
        last_err = None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(key, value, arg)
            except ConfigError as err:
                last_err = err
        raise last_err or ConfigError(key, f"cannot parse {value!r}")
    if origin in (tuple, list):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(parts) != len(args):
                raise ConfigError(key, f"expected {len(args)} comma-separated values, got {value!r}")
            return tuple(_coerce_scalar(key, p, a) for p, a in zip(parts, args))
        inner = args[0] if args else str
        items = [_coerce_scalar(key, p, inner) for p in parts]
        return tuple(items) if origin is tuple else items
    if isinstance(annotation, type):
        return _coerce_scalar(key, value, annotation)
    return value


def build_dataclass(cls, values: Mapping[str, str], *, strict: bool = True, **base):
    """Instantiate ``cls`` from string values, leaving unspecified fields at default.

    With ``strict`` unknown keys raise :class:`ConfigError`.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = dict(base)
    for key, value in values.items():
        if key not in names:
            if strict:
                raise ConfigError(key, f"unknown key for {cls.__name__}")
            continue
        kwargs[key] = _coerce(key, value, hints[key])
    return cls(**kwargs)


def split_config(values: Mapping[str, str], *classes) -> list[dict[str, str]]:
    """Partition flat values among dataclasses by field name; unknown keys raise."""
    parts: list[dict[str, str]] = [{} for _ in classes]
    field_sets = [{f.name for f in dataclasses.fields(c)} for c in classes]
    for key, value in values.items():
        hit = False
        for part, names in zip(parts, field_sets):
            if key in names:
                part[key] = value
                hit = True
        if not hit:
            raise ConfigError(key, "unknown config key")
    return parts
