"""Canonical length-prefixed encoding and boundary message framing.

Every value is ``tag(1) | length(4, big-endian) | payload``.  The encoding is
injective and deterministic, so it doubles as the byte string that gets
signed.  Dicts are encoded with keys sorted by their encoded form.
"""

from __future__ import annotations

import enum
import struct
from typing import Any

from .errors import FramingError

_LEN = struct.Struct(">I")

_NONE = b"N"
_TRUE = b"T"
_FALSE = b"F"
_INT = b"I"
_BYTES = b"B"
_STR = b"S"
_LIST = b"L"
_DICT = b"D"


def _int_bytes(value: int) -> bytes:
    length = (value.bit_length() + 8) // 8
    return value.to_bytes(length, "big", signed=True)


class Encoded(bytes):
    """An already encoded value, spliced into an enclosing encoding verbatim."""


def encode(value: Any) -> bytes:
    """Encode ``None``/bool/int/bytes/str and nested lists, tuples, dicts."""
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


_CONST = {None: _NONE + _LEN.pack(0), True: _TRUE + _LEN.pack(0), False: _FALSE + _LEN.pack(0)}


def _encode_into(value: Any, out: bytearray) -> None:
    # Containers reserve their length field and backpatch it.
    if value is None or value is True or value is False:
        out += _CONST[value]
    elif isinstance(value, Encoded):
        out += value
    elif isinstance(value, int):
        raw = _int_bytes(value)
        out += _INT + _LEN.pack(len(raw)) + raw
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        out += _BYTES + _LEN.pack(len(raw)) + raw
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += _STR + _LEN.pack(len(raw)) + raw
    elif isinstance(value, (list, tuple)):
        out += _LIST + b"\0\0\0\0"
        mark = len(out)
        for item in value:
            _encode_into(item, out)
        _LEN.pack_into(out, mark - 4, len(out) - mark)
    elif isinstance(value, dict):
        items = sorted((encode(k), encode(v)) for k, v in value.items())
        body = b"".join(k + v for k, v in items)
        out += _DICT + _LEN.pack(len(body)) + body
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


def decode(data: bytes) -> Any:
    """Inverse of :func:`encode`.  Tuples come back as lists."""
    value, offset = _decode_at(bytes(data), 0)
    if offset != len(data):
        raise FramingError("trailing bytes after encoded value")
    return value


def _decode_at(data: bytes, offset: int) -> tuple[Any, int]:
    if offset + 5 > len(data):
        raise FramingError("truncated value header")
    tag = data[offset : offset + 1]
    (length,) = _LEN.unpack_from(data, offset + 1)
    start = offset + 5
    end = start + length
    if end > len(data):
        raise FramingError("truncated value payload")
    payload = data[start:end]
    if tag in (_NONE, _TRUE, _FALSE):
        if length:
            raise FramingError("non-empty payload for constant")
        return {_NONE: None, _TRUE: True, _FALSE: False}[tag], end
    if tag == _INT:
        if not length:
            raise FramingError("empty integer")
        value = int.from_bytes(payload, "big", signed=True)
        if _int_bytes(value) != payload:
            raise FramingError("non-canonical integer")
        return value, end
    if tag == _BYTES:
        return payload, end
    if tag == _STR:
        try:
            return payload.decode("utf-8"), end
        except UnicodeDecodeError as exc:
            raise FramingError("invalid utf-8") from exc
    if tag == _LIST:
        items = []
        pos = start
        while pos < end:
            item, pos = _decode_at(data, pos)
            items.append(item)
        if pos != end:
            raise FramingError("list overrun")
        return items, end
    if tag == _DICT:
        result: dict[Any, Any] = {}
        pos = start
        last_key = None
        while pos < end:
            key_start = pos
            key, pos = _decode_at(data, pos)
            raw_key = data[key_start:pos]
            if last_key is not None and raw_key <= last_key:
                raise FramingError("dict keys not in canonical order")
            last_key = raw_key
            if isinstance(key, list):
                key = tuple(key)
            value, pos = _decode_at(data, pos)
            result[key] = value
        if pos != end:
            raise FramingError("dict overrun")
        return result, end
    raise FramingError(f"unknown tag {tag!r}")


# -- framing ----------------------------------------------------------------


class MsgType(enum.IntEnum):
    INSTALL1 = 1
    INSTALL2 = 2
    INSTALL3 = 3
    INVOKE = 4
    INVOKE_RESP = 5
    XFORM = 6


FRAME_HEADER = 5


def frame(msg_type: MsgType, body: Any) -> bytes:
    """``length(4) | type(1) | encode(body)``; length counts the body only."""
    payload = encode(body)
    return _LEN.pack(len(payload)) + bytes([int(msg_type)]) + payload


def unframe(data: bytes, expected: MsgType | None = None) -> tuple[MsgType, Any]:
    if len(data) < FRAME_HEADER:
        raise FramingError("short frame")
    (length,) = _LEN.unpack_from(data, 0)
    if length != len(data) - FRAME_HEADER:
        raise FramingError("frame length mismatch")
    try:
        msg_type = MsgType(data[4])
    except ValueError as exc:
        raise FramingError(f"unknown message type {data[4]}") from exc
    if expected is not None and msg_type != expected:
        raise FramingError(f"expected {expected.name}, got {msg_type.name}")
    return msg_type, decode(data[FRAME_HEADER:])


def length_prefixed(*fields: bytes) -> bytes:
    """Plain length-prefixed concatenation used for digests."""
    return b"".join(_LEN.pack(len(f)) + f for f in fields)
