"""Byte layout of the TPM commands the vTPM understands.

Commands and responses use the TPM 2.0 header shape::

    command  := tag:u16be(0x8001) size:u32be code:u32be params
    response := tag:u16be(0x8001) size:u32be rc:u32be   params

``size`` counts the whole message. ``params`` is a canonical field list
(see :mod:`cvmtrust.encoding`) instead of TPM marshalling.
"""

import enum
import struct

from .encoding import decode, encode

TAG_NO_SESSIONS = 0x8001
_HEADER = struct.Struct(">HII")


class CommandCode(enum.IntEnum):
    Create = 0x153
    Sign = 0x15D
    Quote = 0x158
    VerifySignature = 0x177
    GetRandom = 0x17B
    Hash = 0x17D
    PCR_Read = 0x17E
    PCR_Extend = 0x182
    # vendor range: quote plus the material a verifier needs alongside it
    Vendor_Evidence = 0x20000001


class ResponseCode(enum.IntEnum):
    SUCCESS = 0x000
    VALUE = 0x084
    HANDLE = 0x08B
    SIGNATURE = 0x09B
    FAILURE = 0x101
    COMMAND_CODE = 0x143


class CommandFormatError(ValueError):
    pass


def build(code, *params):
    body = encode(*params)
    return _HEADER.pack(TAG_NO_SESSIONS, _HEADER.size + len(body), int(code)) + body


def parse(raw):
    """Return ``(code_or_rc, params)``; used for both directions."""
    if len(raw) < _HEADER.size:
        raise CommandFormatError("short TPM message")
    tag, size, code = _HEADER.unpack_from(raw)
    if tag != TAG_NO_SESSIONS or size != len(raw):
        raise CommandFormatError("bad TPM header")
    try:
        return code, decode(raw[_HEADER.size:])
    except ValueError as exc:
        raise CommandFormatError(str(exc)) from None


def response(rc, *params):
    return build(rc, *params)
