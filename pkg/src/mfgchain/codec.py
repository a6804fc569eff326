"""Canonical byte encoding and hashing.

Every hash, signature, wire message, and trace line in this package is
computed over the byte encoding produced here. The encoding is a strict
JSON subset chosen so that two independent processes serializing the
same value always produce identical bytes:

* map keys are text and emitted sorted by code point,
* no insignificant whitespace,
* integers in shortest decimal form,
* fractional numbers in shortest round-trip decimal form,
* strings escaped exactly as Python's json module escapes them with
  ``ensure_ascii=False``, encoded as UTF-8.

Values are limited to ``None``, ``bool``, ``int``, finite ``float``,
``str``, lists/tuples, and maps with text keys.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

ZERO_HASH = "0" * 64


class CanonicalizationError(ValueError):
    """Raised when a value cannot be canonically encoded."""


def canonical_serialize(value: Any) -> bytes:
    """Encode ``value`` into its canonical byte form."""
    parts: list[str] = []
    _emit(value, parts)
    return "".join(parts).encode("utf-8")


def _emit(value: Any, parts: list[str]) -> None:
    if value is None:
        parts.append("null")
    elif isinstance(value, bool):
        parts.append("true" if value else "false")
    elif isinstance(value, int):
        parts.append(str(value))
    elif isinstance(value, float):
        if not math.isfinite(value):
            raise CanonicalizationError(f"non-finite number: {value!r}")
        parts.append(repr(value))
    elif isinstance(value, str):
        parts.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, (list, tuple)):
        parts.append("[")
        for i, item in enumerate(value):
            if i:
                parts.append(",")
            _emit(item, parts)
        parts.append("]")
    elif isinstance(value, dict):
        for key in value:
            if not isinstance(key, str):
                raise CanonicalizationError(f"non-text map key: {key!r}")
        parts.append("{")
        for i, key in enumerate(sorted(value)):
            if i:
                parts.append(",")
            parts.append(json.dumps(key, ensure_ascii=False))
            parts.append(":")
            _emit(value[key], parts)
        parts.append("}")
    else:
        raise CanonicalizationError(f"unsupported type: {type(value).__name__}")


def canonical_parse(data: bytes | str) -> Any:
    """Decode canonical bytes back into a value.

    Accepts any JSON, not just canonical bytes; re-serializing the result
    of parsing canonical input reproduces the input exactly.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise CanonicalizationError(f"invalid encoding: {exc}") from exc


def hash_bytes(data: bytes) -> str:
    """SHA-256 of ``data`` as lowercase hex."""
    return hashlib.sha256(data).hexdigest()


def hash_value(value: Any) -> str:
    """SHA-256 of the canonical encoding of ``value``."""
    return hash_bytes(canonical_serialize(value))
