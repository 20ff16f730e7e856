import hashlib
import hmac as std_hmac

import pytest
from hypothesis import given, settings, strategies as st

from cvmtrust.crypto import (
    CertificateAuthority,
    Certificate,
    Digest,
    KeyPair,
    KeyPairRole,
    KeyRole,
    SymmetricKey,
    aead_open,
    aead_seal,
    agree,
    chain_ok,
    hash,
    hmac,
    issue_certificate,
    self_signed,
    sign,
    verify,
    verify_chain,
)
from cvmtrust.errors import AuthenticationError, CertificateChainError


def test_hash_empty_matches_hashlib():
    assert hash(b"") == bytes.fromhex("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")


@given(st.binary(max_size=2048))
def test_hash_matches_hashlib(data):
    assert hash(data) == hashlib.sha256(data).digest()


@given(st.binary(min_size=32, max_size=32), st.binary(max_size=512))
def test_hmac_matches_stdlib(key, data):
    k = SymmetricKey(key, KeyRole.VmKey)
    assert hmac(k, data) == std_hmac.new(key, data, hashlib.sha256).digest()


def test_digest_rejects_wrong_length():
    with pytest.raises(ValueError):
        Digest(b"short")


def test_symmetric_key_length_checked():
    with pytest.raises(ValueError):
        SymmetricKey(b"x" * 16, KeyRole.VmKey)


_KEY = SymmetricKey.generate(KeyRole.MeasureKey)


@settings(max_examples=1000, deadline=None)
@given(st.binary(max_size=1024), st.binary(max_size=64))
def test_aead_roundtrip(plaintext, ad):
    assert aead_open(_KEY, aead_seal(_KEY, plaintext, ad), ad) == plaintext


@settings(max_examples=1000, deadline=None)
@given(st.binary(max_size=256), st.binary(max_size=32), st.data())
def test_aead_any_bit_flip_rejected(plaintext, ad, data):
    blob = bytearray(aead_seal(_KEY, plaintext, ad))
    pos = data.draw(st.integers(0, len(blob) - 1))
    bit = data.draw(st.integers(0, 7))
    blob[pos] ^= 1 << bit
    with pytest.raises(AuthenticationError):
        aead_open(_KEY, bytes(blob), ad)


@settings(max_examples=1000, deadline=None)
@given(st.binary(max_size=128), st.binary(max_size=32), st.binary(max_size=32))
def test_aead_wrong_ad_rejected(plaintext, ad, other):
    if ad == other:
        other = other + b"\0"
    with pytest.raises(AuthenticationError):
        aead_open(_KEY, aead_seal(_KEY, plaintext, ad), other)


def test_aead_wrong_key_rejected():
    other = SymmetricKey.generate(KeyRole.MeasureKey)
    with pytest.raises(AuthenticationError):
        aead_open(other, aead_seal(_KEY, b"m", b"ad"), b"ad")


def test_aead_truncated_blob_rejected():
    with pytest.raises(AuthenticationError):
        aead_open(_KEY, b"\0" * 10)


def test_aead_nonce_is_fresh():
    assert aead_seal(_KEY, b"same") != aead_seal(_KEY, b"same")


_SIGNER = KeyPair.generate(KeyPairRole.Object)


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=256), st.data())
def test_signature_bit_flips_rejected(data, draw):
    sig = sign(_SIGNER, data)
    assert verify(_SIGNER.public, data, sig)
    flipped = bytearray(sig)
    flipped[draw.draw(st.integers(0, len(sig) - 1))] ^= 1 << draw.draw(st.integers(0, 7))
    assert not verify(_SIGNER.public, data, bytes(flipped))
    if data:
        m = bytearray(data)
        m[draw.draw(st.integers(0, len(m) - 1))] ^= 1
        assert not verify(_SIGNER.public, bytes(m), sig)


def test_verify_garbage_inputs_reject():
    assert not verify(b"short", b"d", b"s")
    assert not verify(_SIGNER.public, b"d", b"")


def test_dh_keys_cannot_sign():
    with pytest.raises((TypeError, ValueError)):
        sign(KeyPair.generate(KeyPairRole.Godh), b"x")


def test_agree_is_symmetric():
    a = KeyPair.generate(KeyPairRole.Godh)
    b = KeyPair.generate(KeyPairRole.PlatformDh)
    assert agree(a, b.public, b"info").material == agree(b, a.public, b"info").material
    assert agree(a, b.public, b"info").material != agree(a, b.public, b"other").material


def test_keypair_private_roundtrip():
    k = KeyPair.generate(KeyPairRole.Tls)
    assert KeyPair.from_private_bytes(k.private_bytes(), KeyPairRole.Tls).public == k.public


def _chain():
    ca = CertificateAuthority()
    trk = KeyPair.generate(KeyPairRole.UserNodeRoot)
    mrk = KeyPair.generate(KeyPairRole.ManagerRoot)
    trk_cert = ca.issue("user-node", trk.public)
    mrk_cert = issue_certificate(trk, "user-node", "mgr", mrk.public)
    return ca, [ca.root, trk_cert, mrk_cert]


def test_verify_chain_accepts_and_returns_leaf():
    ca, chain = _chain()
    assert verify_chain(chain, ca.root).subject == "mgr"
    assert verify_chain(chain[1:], ca.root).subject == "mgr"


def test_verify_chain_names_failing_link():
    ca, chain = _chain()
    other = CertificateAuthority("ca-root")
    with pytest.raises(CertificateChainError) as err:
        verify_chain(chain, other.root)
    assert err.value.index == 0
    bad = Certificate(chain[2].subject, chain[2].subject_public_key, chain[2].issuer, b"\0" * 64)
    with pytest.raises(CertificateChainError) as err:
        verify_chain([*chain[:2], bad], ca.root)
    assert err.value.index == 2


def test_verify_chain_empty_rejected():
    ca, _ = _chain()
    assert not chain_ok([], ca.root)


def test_self_signed_not_trusted_by_other_root():
    ca, _ = _chain()
    k = KeyPair.generate(KeyPairRole.Authority)
    assert not chain_ok([self_signed(k, "ca-root")], ca.root)


def test_certificate_serialization_roundtrip():
    _, chain = _chain()
    for c in chain:
        assert Certificate.from_bytes(c.to_bytes()) == c
        assert Certificate.from_dict(c.to_dict()) == c


def test_ca_unreachable_refuses_issue():
    ca = CertificateAuthority()
    ca.reachable = False
    with pytest.raises(ConnectionError):
        ca.issue("x", b"\0" * 32)
