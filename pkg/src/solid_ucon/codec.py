"""Byte-level encodings shared by hashing, signing and payloads."""

from __future__ import annotations

import json
import struct
from typing import Any

_TAG_BYTES = b"b"
_TAG_STR = b"s"
_TAG_INT = b"i"
_TAG_NONE = b"n"


def frame(*parts: bytes | str | int | None) -> bytes:
    """Unambiguous length-prefixed concatenation.

    Used wherever a tuple of fields is hashed or signed, so that
    ``frame(b"ab", b"c") != frame(b"a", b"bc")``.
    """
    out = bytearray()
    for part in parts:
        if part is None:
            tag, data = _TAG_NONE, b""
        elif isinstance(part, bool):
            raise TypeError("bool is not a frameable field")
        elif isinstance(part, int):
            tag, data = _TAG_INT, str(part).encode("ascii")
        elif isinstance(part, str):
            tag, data = _TAG_STR, part.encode("utf-8")
        elif isinstance(part, (bytes, bytearray)):
            tag, data = _TAG_BYTES, bytes(part)
        else:
            raise TypeError(f"cannot frame {type(part).__name__}")
        out += tag + struct.pack(">I", len(data)) + data
    return bytes(out)


def canonical_json(obj: Any) -> bytes:
    """Compact, key-sorted UTF-8 JSON."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def to_hex(data: bytes) -> str:
    return "0x" + data.hex()


def from_hex(text: str) -> bytes:
    if not isinstance(text, str) or not text.startswith("0x"):
        raise ValueError(f"expected 0x-prefixed hex, got {text!r}")
    return bytes.fromhex(text[2:])
