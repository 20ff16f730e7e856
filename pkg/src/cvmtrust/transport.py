"""Framed request/response links over an in-process registry or loopback TCP.

Wire frame::

    frame := length:u32be type:u8 version:u8 payload

``length`` counts ``type``, ``version`` and ``payload``. Every request gets
exactly one response frame. Handlers that raise a :class:`TrustChainError`
produce an ``ERROR`` frame carrying ``encode(code, message, step)``; the
client side re-raises it.
"""

from __future__ import annotations

import enum
import logging
import socket
import socketserver
import struct
import threading
from typing import Callable, NamedTuple

from .encoding import as_str, decode, encode
from .errors import TransportError, TrustChainError, error_from_code

log = logging.getLogger(__name__)

FRAME_VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
_HEAD = struct.Struct(">IBB")


class FrameType(enum.IntEnum):
    ERROR = 0x00
    ACK = 0x01
    EVENT = 0x10
    EVENT_DONE = 0x11
    HANDSHAKE_INIT = 0x20
    HANDSHAKE_RESP = 0x21
    HANDSHAKE_FINISH = 0x22
    SECURE = 0x30
    SECURE_BLOB = 0x31
    WRAPPED = 0x40
    DROPPED = 0x41


#: Frame types whose payload is AEAD output.
SEALED_TYPES = frozenset(
    {FrameType.EVENT, FrameType.EVENT_DONE, FrameType.SECURE, FrameType.SECURE_BLOB, FrameType.WRAPPED}
)


class Frame(NamedTuple):
    type: FrameType
    payload: bytes

    def pack(self):
        return pack_frame(self.type, self.payload)


def pack_frame(ftype, payload):
    payload = bytes(payload)
    return _HEAD.pack(len(payload) + 2, int(ftype), FRAME_VERSION) + payload


def unpack_frame(raw):
    if len(raw) < _HEAD.size:
        raise TransportError("short frame")
    length, ftype, version = _HEAD.unpack_from(raw)
    if length != len(raw) - 4:
        raise TransportError("frame length mismatch")
    return _check(ftype, version, raw[_HEAD.size:])


def _check(ftype, version, payload):
    if version != FRAME_VERSION:
        raise TransportError(f"unsupported frame version {version}")
    try:
        return Frame(FrameType(ftype), bytes(payload))
    except ValueError:
        raise TransportError(f"unknown frame type {ftype:#x}") from None


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock):
    length, ftype, version = _HEAD.unpack(_recv_exact(sock, _HEAD.size))
    if length < 2 or length > MAX_FRAME:
        raise TransportError(f"bad frame length {length}")
    return _check(ftype, version, _recv_exact(sock, length - 2))


def error_frame(exc):
    step = "" if exc.step is None else str(exc.step)
    return Frame(FrameType.ERROR, encode(exc.code, str(exc), step))


def raise_for_error(frame):
    if frame.type is FrameType.ERROR:
        code, message, step = (as_str(f) for f in decode(frame.payload, 3))
        raise error_from_code(code, message, step or None)
    return frame


Handler = Callable[[Frame], Frame]


def _dispatch(handler, frame):
    try:
        return handler(frame)
    except TrustChainError as exc:
        return error_frame(exc)


class Link:
    """Client side of one endpoint."""

    def request(self, ftype, payload=b"") -> Frame:
        return raise_for_error(self.send(Frame(FrameType(ftype), bytes(payload))))

    def send(self, frame: Frame) -> Frame:
        raise NotImplementedError

    def close(self):
        pass


class LocalLink(Link):
    def __init__(self, handler):
        self._handler = handler

    def send(self, frame):
        # round-trip through bytes so both transports see identical framing
        return unpack_frame(_dispatch(self._handler, unpack_frame(frame.pack())).pack())


class TcpLink(Link):
    def __init__(self, address, timeout=10.0):
        try:
            self._sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from None
        self._lock = threading.Lock()

    def send(self, frame):
        with self._lock:
            try:
                self._sock.sendall(frame.pack())
                return read_frame(self._sock)
            except OSError as exc:
                raise TransportError(str(exc)) from None

    def close(self):
        self._sock.close()


class TappedLink(Link):
    """A link whose frames cross a wire someone else controls.

    ``tap(channel, direction, frame)`` may return a replacement frame or
    ``None`` to drop it; ``direction`` is ``"request"`` or ``"response"``.
    """

    def __init__(self, inner, channel, tap):
        self.inner = inner
        self.channel = channel
        self._tap = tap

    def send(self, frame):
        out = self._tap(self.channel, "request", frame)
        if out is None:
            return Frame(FrameType.DROPPED, b"")
        back = self.inner.send(out)
        back = self._tap(self.channel, "response", back)
        return back if back is not None else Frame(FrameType.DROPPED, b"")

    def close(self):
        self.inner.close()


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                frame = read_frame(self.request)
            except TransportError:
                return
            except OSError:
                return
            reply = _dispatch(self.server.frame_handler, frame)
            try:
                self.request.sendall(reply.pack())
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Network:
    """Named endpoints on one transport: ``"local"`` or ``"tcp"``."""

    def __init__(self, transport="local"):
        if transport not in ("local", "tcp"):
            raise ValueError(f"unknown transport {transport!r}")
        self.transport = transport
        self._handlers = {}
        self._servers = {}
        self._links = []
        self._lock = threading.Lock()

    def serve(self, name, handler: Handler):
        with self._lock:
            if name in self._handlers:
                raise TransportError(f"endpoint {name!r} already bound")
            self._handlers[name] = handler
            if self.transport == "tcp":
                try:
                    server = _Server(("127.0.0.1", 0), _FrameHandler)
                except OSError as exc:
                    raise TransportError(f"cannot bind {name}: {exc}") from None
                server.frame_handler = handler
                threading.Thread(target=server.serve_forever, name=f"ep:{name}", daemon=True).start()
                self._servers[name] = server
                log.debug("endpoint %s on %s", name, server.server_address)

    def address(self, name):
        server = self._servers.get(name)
        return server.server_address if server else None

    def connect(self, name) -> Link:
        with self._lock:
            if name not in self._handlers:
                raise TransportError(f"no endpoint named {name!r}")
            if self.transport == "tcp":
                link = TcpLink(self._servers[name].server_address)
            else:
                link = LocalLink(self._handlers[name])
            self._links.append(link)
            return link

    def unserve(self, name):
        with self._lock:
            self._handlers.pop(name, None)
            server = self._servers.pop(name, None)
        if server:
            server.shutdown()
            server.server_close()

    def close(self):
        for link in self._links:
            link.close()
        for name in list(self._servers):
            self.unserve(name)
        self._handlers.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
