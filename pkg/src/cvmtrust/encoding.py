"""Canonical byte encoding for everything that is signed, MAC'd or sealed.

A record is the concatenation of its fields in declared order. Every field
is written as a 4-byte big-endian length followed by the field bytes:

    field := len:u32be || bytes[len]

``str`` fields are UTF-8, ``int`` fields are unsigned 64-bit big-endian
(always 8 bytes of content), nested records are pre-encoded bytes.
"""

import struct

_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class DecodeError(ValueError):
    pass


def _field_bytes(value):
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value)
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, bool):
        return _U64.pack(int(value))
    if isinstance(value, int):
        if not 0 <= value < 2**64:
            raise ValueError(f"integer field out of u64 range: {value}")
        return _U64.pack(value)
    raise TypeError(f"cannot encode field of type {type(value).__name__}")


def encode(*fields):
    out = bytearray()
    for value in fields:
        raw = _field_bytes(value)
        out += _LEN.pack(len(raw))
        out += raw
    return bytes(out)


def encode_list(items):
    """Encode a sequence of already-encoded records, prefixed by its count."""
    return encode(len(items), *items)


def decode(data, count=None):
    """Split ``data`` into its raw fields.

    With ``count`` set, exactly that many fields must be present.
    """
    fields = []
    view = memoryview(data)
    pos = 0
    while pos < len(view):
        if pos + 4 > len(view):
            raise DecodeError("truncated length prefix")
        (n,) = _LEN.unpack_from(view, pos)
        pos += 4
        if pos + n > len(view):
            raise DecodeError("truncated field")
        fields.append(bytes(view[pos:pos + n]))
        pos += n
    if count is not None and len(fields) != count:
        raise DecodeError(f"expected {count} fields, got {len(fields)}")
    return fields


def decode_list(data):
    fields = decode(data)
    if not fields:
        raise DecodeError("missing list count")
    n = as_int(fields[0])
    if n != len(fields) - 1:
        raise DecodeError("list count does not match contents")
    return fields[1:]


def as_int(raw):
    if len(raw) != 8:
        raise DecodeError("integer field must be 8 bytes")
    return _U64.unpack(raw)[0]


def as_str(raw):
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(str(exc)) from None
