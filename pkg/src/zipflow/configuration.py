"""Strict dataclass <-> dict conversion for config files.

Unknown keys are a hard error (no silent defaults for typos), and nested
dataclass fields recurse.
"""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def dataclass_from_dict(cls, data: dict, path: str = ""):
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    # PEP 563 string annotations: resolve to real types for nesting detection
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        ftype = hints.get(name, fields[name].type)
        sub_path = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(ftype) and isinstance(value, dict):
            kwargs[name] = dataclass_from_dict(ftype, value, sub_path)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def dataclass_to_dict(obj) -> dict:
    return dataclasses.asdict(obj)
