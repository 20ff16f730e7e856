"""Authenticated channels between actors.

Two constructions live here:

* :class:`SecureChannel` - the manager <-> vTPM-host channel. A signed
  ephemeral X25519 handshake yields one AEAD key; each record is
  ``seq:u64be || nonce || ciphertext || tag`` with
  ``AAD = encode("channel", channel_id, sender, seq)``.
* :class:`SessionCipher` - wrapping of raw TPM commands between a guest
  driver and its vTPM under the per-launch session key.

Wrapped-command frame::

    version:u8 || id_len:u16be || acvm_id || direction:u8 || sequence:u64be || aead_blob

with ``AAD = encode("tpm-session", acvm_id, direction, sequence)``.
"""

from __future__ import annotations

import os
import struct
import threading

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PublicKey

from .crypto import (
    Certificate,
    KeyPair,
    KeyPairRole,
    KeyRole,
    SymmetricKey,
    aead_open,
    aead_seal,
    derive_key,
    hash,
    sign,
    verify,
    verify_chain,
)
from .encoding import DecodeError, as_str, decode, decode_list, encode, encode_list
from .errors import (
    AuthenticationError,
    CertificateChainError,
    ChannelAuthenticationFailed,
)

_SEQ = struct.Struct(">Q")
INITIATOR, RESPONDER = 0, 1


class SecureChannel:
    def __init__(self, channel_id, key: SymmetricKey, side):
        self.channel_id = channel_id
        self._key = key
        self.side = side
        self.send_seq = 0
        self.recv_seq = 0
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()

    def _aad(self, sender, seq):
        return encode(b"channel", self.channel_id, sender, seq)

    def seal(self, kind, body=b"") -> bytes:
        with self._send_lock:
            seq = self.send_seq
            self.send_seq += 1
            return _SEQ.pack(seq) + aead_seal(self._key, encode(kind, body), self._aad(self.side, seq))

    def open(self, record):
        """Return ``(kind, body)``; wrong key, tampering or reordering raise."""
        record = bytes(record)
        with self._recv_lock:
            if len(record) < _SEQ.size:
                raise ChannelAuthenticationFailed("truncated channel record")
            (seq,) = _SEQ.unpack_from(record)
            if seq != self.recv_seq:
                raise ChannelAuthenticationFailed(
                    f"channel {self.channel_id}: sequence {seq}, expected {self.recv_seq}"
                )
            try:
                plain = aead_open(self._key, record[_SEQ.size:], self._aad(1 - self.side, seq))
            except AuthenticationError:
                raise ChannelAuthenticationFailed(f"channel {self.channel_id}: record rejected") from None
            self.recv_seq += 1
        kind, body = decode(plain, 2)
        return as_str(kind), body


class HandshakeInitiator:
    """Initiator side; authenticates with a certificate chain to the CA root."""

    def __init__(self, channel_id, name, signing_key: KeyPair, chain, peer_public):
        self.channel_id = channel_id
        self.name = name
        self._signing_key = signing_key
        self._chain = list(chain)
        self._peer_public = bytes(peer_public)
        self._eph = KeyPair.generate(KeyPairRole.Ephemeral)
        self._msg1 = None

    def start(self) -> bytes:
        self._msg1 = encode(self.channel_id, self.name, self._eph.public, os.urandom(16))
        return self._msg1

    def finish(self, msg2) -> tuple:
        """Check the responder and return ``(msg3, channel)``."""
        try:
            body, sig, cert_raw = decode(msg2, 3)
            _name, eph_pub, _nonce = decode(body, 3)
            cert = Certificate.from_bytes(cert_raw)
        except (DecodeError, ValueError) as exc:
            raise ChannelAuthenticationFailed(f"bad handshake response: {exc}") from None
        if cert.subject_public_key != self._peer_public:
            raise ChannelAuthenticationFailed("responder key is not the pinned TLS key")
        if not verify(self._peer_public, encode(b"hs-resp", hash(self._msg1), body), sig):
            raise ChannelAuthenticationFailed("responder handshake signature invalid")
        sig_i = sign(self._signing_key, encode(b"hs-fin", hash(self._msg1), hash(msg2)))
        msg3 = encode(sig_i, encode_list([c.to_bytes() for c in self._chain]))
        key = _channel_key(self._eph, eph_pub, self._msg1, msg2)
        return msg3, SecureChannel(self.channel_id, key, INITIATOR)


class HandshakeResponder:
    def __init__(self, name, signing_key: KeyPair, certificate: Certificate, trusted_root, expected_peer=None):
        self.name = name
        self._signing_key = signing_key
        self._cert = certificate
        self._root = trusted_root
        self._expected_peer = expected_peer
        self._pending = None

    def respond(self, msg1) -> bytes:
        try:
            channel_id, peer_name, eph_pub, _nonce = decode(msg1, 4)
        except DecodeError as exc:
            raise ChannelAuthenticationFailed(f"bad handshake init: {exc}") from None
        eph = KeyPair.generate(KeyPairRole.Ephemeral)
        body = encode(self.name, eph.public, os.urandom(16))
        sig = sign(self._signing_key, encode(b"hs-resp", hash(msg1), body))
        msg2 = encode(body, sig, self._cert.to_bytes())
        self._pending = (as_str(channel_id), as_str(peer_name), eph, eph_pub, bytes(msg1), msg2)
        return msg2

    def complete(self, msg3) -> SecureChannel:
        if self._pending is None:
            raise ChannelAuthenticationFailed("handshake finish without init")
        channel_id, peer_name, eph, peer_eph, msg1, msg2 = self._pending
        self._pending = None
        try:
            sig, chain_raw = decode(msg3, 2)
            chain = [Certificate.from_bytes(c) for c in decode_list(chain_raw)]
            leaf = verify_chain(chain, self._root)
        except (DecodeError, ValueError, CertificateChainError) as exc:
            raise ChannelAuthenticationFailed(f"initiator not trusted: {exc}") from None
        if leaf.subject != peer_name or (self._expected_peer and peer_name != self._expected_peer):
            raise ChannelAuthenticationFailed(f"unexpected initiator {peer_name!r}")
        if not verify(leaf.subject_public_key, encode(b"hs-fin", hash(msg1), hash(msg2)), sig):
            raise ChannelAuthenticationFailed("initiator handshake signature invalid")
        return SecureChannel(channel_id, _channel_key(eph, peer_eph, msg1, msg2), RESPONDER)


def _channel_key(eph: KeyPair, peer_eph, msg1, msg2):
    try:
        shared = eph.private.exchange(X25519PublicKey.from_public_bytes(bytes(peer_eph)))
    except ValueError as exc:
        raise ChannelAuthenticationFailed(f"bad ephemeral key: {exc}") from None
    return derive_key(shared, encode(b"channel-key", hash(msg1 + msg2)), KeyRole.ChannelKey)


WRAP_VERSION = 1
GUEST_TO_VTPM, VTPM_TO_GUEST = 0, 1
_WRAP_HEAD = struct.Struct(">BH")
_WRAP_TAIL = struct.Struct(">BQ")


def pack_wrapped(acvm_id, direction, sequence, blob):
    ident = acvm_id.encode("utf-8")
    return _WRAP_HEAD.pack(WRAP_VERSION, len(ident)) + ident + _WRAP_TAIL.pack(direction, sequence) + blob


def unpack_wrapped(frame):
    frame = bytes(frame)
    try:
        version, n = _WRAP_HEAD.unpack_from(frame)
        ident = frame[_WRAP_HEAD.size:_WRAP_HEAD.size + n]
        direction, seq = _WRAP_TAIL.unpack_from(frame, _WRAP_HEAD.size + n)
    except struct.error:
        raise ChannelAuthenticationFailed("truncated wrapped frame") from None
    if version != WRAP_VERSION or len(ident) != n:
        raise ChannelAuthenticationFailed("bad wrapped frame header")
    start = _WRAP_HEAD.size + n + _WRAP_TAIL.size
    return ident.decode("utf-8", "replace"), direction, seq, frame[start:]


class SessionCipher:
    """One end of a session-key protected TPM command stream."""

    def __init__(self, key: SymmetricKey, acvm_id, send_direction):
        if key.role is not KeyRole.SessionKey:
            raise ValueError("TPM command wrapping needs a SessionKey")
        self._key = key
        self.acvm_id = acvm_id
        self.send_direction = send_direction
        self.send_seq = 1
        self.recv_seq = 1

    @staticmethod
    def _aad(acvm_id, direction, seq):
        return encode(b"tpm-session", acvm_id, direction, seq)

    def wrap(self, raw) -> bytes:
        seq = self.send_seq
        self.send_seq += 1
        blob = aead_seal(self._key, raw, self._aad(self.acvm_id, self.send_direction, seq))
        return pack_wrapped(self.acvm_id, self.send_direction, seq, blob)

    def unwrap(self, frame) -> bytes:
        acvm_id, direction, seq, blob = unpack_wrapped(frame)
        if acvm_id != self.acvm_id or direction != 1 - self.send_direction:
            raise ChannelAuthenticationFailed("wrapped frame for another session")
        if seq != self.recv_seq:
            raise ChannelAuthenticationFailed(f"wrapped frame sequence {seq}, expected {self.recv_seq}")
        try:
            raw = aead_open(self._key, blob, self._aad(acvm_id, direction, seq))
        except AuthenticationError:
            raise ChannelAuthenticationFailed("wrapped frame failed authentication") from None
        self.recv_seq += 1
        return raw
