"""Typed configuration sections read from TOML, with dot-path overrides."""
from __future__ import annotations

import dataclasses
import types
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

import tomli
import tomli_w

from .errors import ConfigError


def load_toml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_value(raw: str) -> Any:
    """Interpret ``raw`` as a TOML value, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def apply_override(data: dict, cls, spec: str) -> None:
    """Apply ``key=value`` to the raw config dict in place.

    ``key`` is a dot path such as ``run.epochs``; a bare field name is accepted
    when exactly one section of ``cls`` has a field of that name.
    """
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    key, raw = (part.strip() for part in spec.split("=", 1))
    path = key.split(".")
    if len(path) == 1:
        owners = [name for name, tp in get_type_hints(cls).items()
                  if dataclasses.is_dataclass(tp) and path[0] in get_type_hints(tp)]
        if len(owners) != 1:
            raise ConfigError(f"override key {key!r} is {'ambiguous' if owners else 'unknown'}; use section.field")
        path = [owners[0], path[0]]
    node = data
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-table value")
    node[path[-1]] = parse_value(raw)


def _describe(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(tp, value, name: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: expected a table")
        return from_dict(tp, value, name + ".")
    origin = get_origin(tp)
    if origin in (Union, getattr(types, "UnionType", Union)):
        if value is None and type(None) in get_args(tp):
            return None
        for arg in get_args(tp):
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, name)
            except ConfigError:
                pass
        raise ConfigError(f"{name}: {value!r} does not match {' or '.join(_describe(a) for a in get_args(tp))}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        (item,) = get_args(tp) or (Any,)
        return [_coerce(item, v, f"{name}[{i}]") for i, v in enumerate(value)]
    if tp is Any:
        return value
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and type(value) is tp:
        return value
    raise ConfigError(f"{name}: expected {_describe(tp)}, got {value!r}")


def from_dict(cls, data: dict, where: str = ""):
    """Build dataclass ``cls`` from a nested dict, rejecting unknown keys and wrong types."""
    hints = get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"unknown config field {where}{key}")
        kwargs[key] = _coerce(hints[key], value, f"{where}{key}")
    return cls(**kwargs)


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    return obj


def to_toml(cfg) -> str:
    return tomli_w.dumps(_strip_none(dataclasses.asdict(cfg)))


def load_config(cls, path=None, overrides=()) -> Any:
    data = load_toml(path) if path else {}
    for spec in overrides:
        apply_override(data, cls, spec)
    cfg = from_dict(cls, data)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg
