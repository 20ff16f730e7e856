import struct

import pytest

from cvmtrust.errors import BindingViolation, TransportError
from cvmtrust.transport import Frame, FrameType, Network, pack_frame, unpack_frame


def test_frame_layout():
    raw = pack_frame(FrameType.EVENT, b"abc")
    n, t, v = struct.unpack(">IBB", raw[:6])
    assert n == 5 and t == FrameType.EVENT and v == 1 and raw[6:] == b"abc"
    assert unpack_frame(raw) == Frame(FrameType.EVENT, b"abc")


def test_bad_version_or_length_rejected():
    raw = bytearray(pack_frame(FrameType.ACK, b""))
    raw[5] = 9
    with pytest.raises(TransportError):
        unpack_frame(bytes(raw))
    with pytest.raises(TransportError):
        unpack_frame(pack_frame(FrameType.ACK, b"xy")[:-1])


@pytest.mark.parametrize("kind", ["local", "tcp"])
def test_request_and_error_propagation(kind):
    def handler(frame):
        if frame.payload == b"boom":
            raise BindingViolation("nope")
        return Frame(FrameType.ACK, frame.payload[::-1])

    with Network(kind) as net:
        net.serve("svc", handler)
        link = net.connect("svc")
        assert link.request(FrameType.EVENT, b"abc").payload == b"cba"
        with pytest.raises(BindingViolation):
            link.request(FrameType.EVENT, b"boom")
        link.close()


def test_unknown_endpoint_is_infrastructure_error():
    with Network("local") as net:
        with pytest.raises(TransportError):
            net.connect("nowhere")
