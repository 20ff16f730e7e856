import pytest

from cvmtrust.channel import (
    GUEST_TO_VTPM,
    VTPM_TO_GUEST,
    HandshakeInitiator,
    HandshakeResponder,
    SessionCipher,
    unpack_wrapped,
)
from cvmtrust.crypto import CertificateAuthority, KeyPair, KeyPairRole, KeyRole, SymmetricKey, issue_certificate
from cvmtrust.errors import ChannelAuthenticationFailed


def _parties(peer_name="mgr", expected="mgr"):
    ca = CertificateAuthority()
    trk = KeyPair.generate(KeyPairRole.UserNodeRoot)
    trk_cert = ca.issue("user-node", trk.public)
    mrk = KeyPair.generate(KeyPairRole.ManagerRoot)
    mrk_cert = issue_certificate(trk, "user-node", peer_name, mrk.public)
    tls = KeyPair.generate(KeyPairRole.Tls)
    tls_cert = ca.issue("tls:t1", tls.public)
    init = HandshakeInitiator("t1", peer_name, mrk, [ca.root, trk_cert, mrk_cert], tls.public)
    resp = HandshakeResponder("tls:t1", tls, tls_cert, ca.root, expected_peer=expected)
    return init, resp, ca


def _connect():
    init, resp, _ = _parties()
    msg2 = resp.respond(init.start())
    msg3, a = init.finish(msg2)
    return a, resp.complete(msg3)


def test_handshake_and_records():
    a, b = _connect()
    assert b.open(a.seal("hello", b"x")) == ("hello", b"x")
    assert a.open(b.seal("reply", b"y")) == ("reply", b"y")


def test_record_replay_and_reorder_rejected():
    a, b = _connect()
    r0, r1 = a.seal("m", b"0"), a.seal("m", b"1")
    with pytest.raises(ChannelAuthenticationFailed):
        b.open(r1)
    b.open(r0)
    with pytest.raises(ChannelAuthenticationFailed):
        b.open(r0)


def test_record_tamper_rejected():
    a, b = _connect()
    rec = bytearray(a.seal("m", b"body"))
    rec[-1] ^= 1
    with pytest.raises(ChannelAuthenticationFailed):
        b.open(bytes(rec))


def test_reflected_record_rejected():
    a, b = _connect()
    with pytest.raises(ChannelAuthenticationFailed):
        a.open(a.seal("m"))


def test_unpinned_responder_rejected():
    init, _, ca = _parties()
    mitm_key = KeyPair.generate(KeyPairRole.Tls)
    mitm = HandshakeResponder("tls:t1", mitm_key, ca.issue("tls:t1", mitm_key.public), ca.root)
    with pytest.raises(ChannelAuthenticationFailed):
        init.finish(mitm.respond(init.start()))


def test_untrusted_or_unexpected_initiator_rejected():
    init, resp, _ = _parties(peer_name="intruder", expected="mgr")
    msg3, _ = init.finish(resp.respond(init.start()))
    with pytest.raises(ChannelAuthenticationFailed):
        resp.complete(msg3)
    init, _, _ = _parties()
    _, resp2, _ = _parties()  # different CA root
    msg2 = resp2.respond(init.start())
    with pytest.raises(ChannelAuthenticationFailed):
        init.finish(msg2)


def _sessions(acvm="a"):
    k = SymmetricKey.generate(KeyRole.SessionKey)
    return SessionCipher(k, acvm, GUEST_TO_VTPM), SessionCipher(k, acvm, VTPM_TO_GUEST)


def test_session_wrap_roundtrip_and_layout():
    g, v = _sessions()
    frame = g.wrap(b"cmd")
    acvm, direction, seq, _ = unpack_wrapped(frame)
    assert (acvm, direction, seq) == ("a", GUEST_TO_VTPM, 1)
    assert v.unwrap(frame) == b"cmd"
    assert g.unwrap(v.wrap(b"rsp")) == b"rsp"


def test_session_replay_reflection_and_key_mismatch():
    g, v = _sessions()
    f = g.wrap(b"cmd")
    v.unwrap(f)
    with pytest.raises(ChannelAuthenticationFailed):
        v.unwrap(f)
    with pytest.raises(ChannelAuthenticationFailed):
        g.unwrap(g.wrap(b"x"))
    other, _ = _sessions()
    _, v2 = _sessions()
    with pytest.raises(ChannelAuthenticationFailed):
        v2.unwrap(other.wrap(b"cmd"))


def test_session_requires_session_key():
    with pytest.raises(ValueError):
        SessionCipher(SymmetricKey.generate(KeyRole.VmKey), "a", GUEST_TO_VTPM)
