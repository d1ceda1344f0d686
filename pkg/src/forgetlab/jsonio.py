"""Canonical JSON writing: sorted keys, 17-significant-digit floats, stable bytes.

The stdlib encoder emits floats via repr (shortest roundtrip form), which is
exact but not canonical across writers. Every on-disk number here uses %.17g,
which also roundtrips float64 exactly, so reruns produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from typing import Any, TextIO

import numpy as np


def _format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError("non-finite float cannot be serialized")
    return format(x, ".17g")


def _emit(obj: Any, parts: list[str], indent: int, level: int) -> None:
    pad = " " * (indent * (level + 1))
    closing = " " * (indent * level)
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(_format_float(float(obj)))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, dict):
        keys = list(obj.keys())
        if any(not isinstance(k, str) for k in keys):
            raise TypeError("JSON object keys must be strings")
        if not keys:
            parts.append("{}")
            return
        parts.append("{\n")
        for i, key in enumerate(sorted(keys)):
            parts.append(pad)
            parts.append(json.dumps(key))
            parts.append(": ")
            _emit(obj[key], parts, indent, level + 1)
            parts.append(",\n" if i < len(keys) - 1 else "\n")
        parts.append(closing + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = list(np.asarray(obj).tolist()) if isinstance(obj, np.ndarray) else list(obj)
        if not items:
            parts.append("[]")
            return
        parts.append("[\n")
        for i, item in enumerate(items):
            parts.append(pad)
            _emit(item, parts, indent, level + 1)
            parts.append(",\n" if i < len(items) - 1 else "\n")
        parts.append(closing + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} to JSON")


def dumps(obj: Any, indent: int = 2) -> str:
    parts: list[str] = []
    _emit(obj, parts, indent, 0)
    parts.append("\n")
    return "".join(parts)


def dump(obj: Any, fp: TextIO, indent: int = 2) -> None:
    fp.write(dumps(obj, indent=indent))


def write_file(path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        dump(obj, fp)


def read_file(path) -> Any:
    with open(path, "r", encoding="utf-8") as fp:
        return json.load(fp)


def float_to_hex(x: float) -> str:
    """Bit-exact text form of a float64 (sign, hex mantissa, binary exponent)."""
    return float(x).hex()


def float_from_hex(s: str) -> float:
    return float.fromhex(s)
