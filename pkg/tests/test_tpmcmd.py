import struct

import pytest

from cvmtrust import tpmcmd
from cvmtrust.tpmcmd import CommandCode, CommandFormatError


def test_header_layout():
    raw = tpmcmd.build(CommandCode.GetRandom, 8)
    tag, size, code = struct.unpack(">HII", raw[:10])
    assert tag == 0x8001 and size == len(raw) and code == 0x17B


def test_parse_roundtrip():
    code, params = tpmcmd.parse(tpmcmd.build(CommandCode.Hash, b"abc"))
    assert code == CommandCode.Hash and params == [b"abc"]


def test_size_mismatch_rejected():
    raw = tpmcmd.build(CommandCode.Hash, b"abc")
    with pytest.raises(CommandFormatError):
        tpmcmd.parse(raw + b"x")
    with pytest.raises(CommandFormatError):
        tpmcmd.parse(raw[:5])
