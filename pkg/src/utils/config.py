# Flat key=value configuration files.
# Keys mirror the fields of ModelConfig / TrainConfig; tuple fields are comma-separated:
#
#   arch=sdu
#   widths=16,32,64,128
#   learning_rate=5e-5
#   batch_size=4

import dataclasses
import os
import typing
from typing import Any, Dict, Mapping, Tuple, Type

from dotenv import dotenv_values

from src.utils.errors import ConfigValidationError, DataError

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def read_config_file(path: str) -> Dict[str, str]:
    """Read a flat key=value file into a dict of raw strings."""
    if not os.path.isfile(path):
        raise DataError(f"Config file not found: {path}")
    values = dotenv_values(path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigValidationError(f"Config keys without a value in {path}: {', '.join(missing)}")
    return {key: value for key, value in values.items()}


def _coerce(raw: Any, hint: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw

    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is typing.Union:
        if raw.strip().lower() in ('', 'none', 'null'):
            return None
        inner = [arg for arg in args if arg is not type(None)]
        return _coerce(raw, inner[0], key)

    if origin in (tuple, Tuple):
        item_type = args[0] if args else str
        items = [item.strip() for item in raw.split(',') if item.strip()]
        return tuple(_coerce(item, item_type, key) for item in items)

    try:
        if hint is bool:
            lowered = raw.strip().lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError as e:
        raise ConfigValidationError(f"Invalid value for '{key}': {e}")
    return raw


def coerce_fields(cls: Type, mapping: Mapping[str, Any]) -> Dict[str, Any]:
    """Convert raw strings to the types declared on a dataclass.

    Keys that are not fields of ``cls`` are rejected.
    """
    hints = typing.get_type_hints(cls)
    names = {field.name for field in dataclasses.fields(cls)}
    result = {}
    for key, raw in mapping.items():
        if key not in names:
            raise ConfigValidationError(f"Unknown config key '{key}' for {cls.__name__}")
        result[key] = _coerce(raw, hints[key], key)
    return result


def partition_config(mapping: Mapping[str, Any], *classes: Type) -> Tuple[Dict[str, Any], ...]:
    """Split one flat mapping across several dataclasses by field name."""
    parts = []
    claimed = set()
    for cls in classes:
        names = {field.name for field in dataclasses.fields(cls)}
        subset = {key: value for key, value in mapping.items() if key in names}
        claimed.update(subset)
        parts.append(coerce_fields(cls, subset))
    unknown = sorted(set(mapping) - claimed)
    if unknown:
        raise ConfigValidationError(f"Unknown config keys: {', '.join(unknown)}")
    return tuple(parts)


def config_to_mapping(config: Any) -> Dict[str, Any]:
    """Materialize a config dataclass into JSON-friendly values."""
    result = {}
    for key, value in dataclasses.asdict(config).items():
        result[key] = list(value) if isinstance(value, tuple) else value
    return result
