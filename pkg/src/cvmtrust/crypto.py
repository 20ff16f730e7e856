"""Cryptographic primitives used by every actor.

SHA-256 is the only hash, HMAC-SHA256 the only MAC, AES-256-GCM the only
AEAD, Ed25519 the signature scheme and X25519 + HKDF-SHA256 the key
agreement. Certificates are a minimal signed record, not X.509.
"""

from __future__ import annotations

import enum
import hashlib
import hmac as _hmac
import os
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import DecodeError, as_str, decode, encode
from .errors import AuthenticationError, CertificateChainError

DIGEST_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16


class Digest(bytes):
    """A 32-byte SHA-256 value."""

    def __new__(cls, value=b""):
        value = bytes(value)
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def zero(cls):
        return cls(bytes(DIGEST_SIZE))

    @classmethod
    def fromhex(cls, text):
        return cls(bytes.fromhex(text))

    def __repr__(self):
        return f"Digest({self.hex()[:16]}...)"


def hash(data) -> Digest:  # noqa: A001 - mirrors the TPM verb
    return Digest(hashlib.sha256(bytes(data)).digest())


class KeyRole(enum.Enum):
    ImageKey = "ImageKey"
    MeasureKey = "MeasureKey"
    VmKey = "VmKey"
    SessionKey = "SessionKey"
    ChannelKey = "ChannelKey"
    TransportKey = "TransportKey"
    StorageKey = "StorageKey"


#: Roles whose plaintext must never reach the cloud node.
CUSTODIAL_ROLES = frozenset(
    {KeyRole.ImageKey, KeyRole.MeasureKey, KeyRole.VmKey, KeyRole.SessionKey}
)


@dataclass(frozen=True)
class SymmetricKey:
    material: bytes = field(repr=False)
    role: KeyRole

    def __post_init__(self):
        if len(self.material) != KEY_SIZE:
            raise ValueError("symmetric keys are 32 bytes")

    @classmethod
    def generate(cls, role):
        return cls(os.urandom(KEY_SIZE), role)


def hmac(key: SymmetricKey, data) -> Digest:
    return Digest(_hmac.new(key.material, bytes(data), hashlib.sha256).digest())


def aead_seal(key: SymmetricKey, plaintext, associated_data=b""):
    """Return ``nonce || ciphertext || tag`` under a fresh random nonce."""
    nonce = os.urandom(NONCE_SIZE)
    return nonce + AESGCM(key.material).encrypt(nonce, bytes(plaintext), bytes(associated_data))


def aead_open(key: SymmetricKey, blob, associated_data=b""):
    blob = bytes(blob)
    if len(blob) < NONCE_SIZE + TAG_SIZE:
        raise AuthenticationError("sealed blob too short")
    try:
        return AESGCM(key.material).decrypt(blob[:NONCE_SIZE], blob[NONCE_SIZE:], bytes(associated_data))
    except InvalidTag:
        raise AuthenticationError("AEAD authentication failed") from None


class KeyPairRole(enum.Enum):
    UserNodeRoot = "UserNodeRoot"
    ManagerRoot = "ManagerRoot"
    TpmcvmRoot = "TpmcvmRoot"
    Endorsement = "Endorsement"
    Tls = "Tls"
    Godh = "Godh"
    Authority = "Authority"
    Platform = "Platform"
    PlatformDh = "PlatformDh"
    Ephemeral = "Ephemeral"
    Object = "Object"


#: Roles backed by X25519 instead of Ed25519.
DH_ROLES = frozenset({KeyPairRole.Godh, KeyPairRole.PlatformDh, KeyPairRole.Ephemeral})

_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)


@dataclass(frozen=True)
class KeyPair:
    private: object = field(repr=False)
    role: KeyPairRole

    @classmethod
    def generate(cls, role):
        key = X25519PrivateKey.generate() if role in DH_ROLES else Ed25519PrivateKey.generate()
        return cls(key, role)

    @classmethod
    def from_private_bytes(cls, raw, role):
        loader = X25519PrivateKey if role in DH_ROLES else Ed25519PrivateKey
        return cls(loader.from_private_bytes(raw), role)

    @property
    def public(self) -> bytes:
        return self.private.public_key().public_bytes(**_RAW)

    def private_bytes(self) -> bytes:
        return self.private.private_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PrivateFormat.Raw,
            encryption_algorithm=serialization.NoEncryption(),
        )

    @property
    def is_dh(self):
        return self.role in DH_ROLES


def sign(key: KeyPair, data) -> bytes:
    if key.is_dh:
        raise TypeError(f"{key.role.value} keys cannot sign")
    return key.private.sign(bytes(data))


def verify(public: bytes, data, signature) -> bool:
    """Ed25519 verification; any malformed input is a plain reject."""
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public)).verify(bytes(signature), bytes(data))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def derive_key(shared_secret, info, role, salt=None) -> SymmetricKey:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=salt, info=bytes(info))
    return SymmetricKey(hkdf.derive(bytes(shared_secret)), role)


def agree(private: KeyPair, peer_public: bytes, info, role=KeyRole.TransportKey) -> SymmetricKey:
    """X25519 agreement followed by HKDF, as used for secret injection."""
    if not private.is_dh:
        raise TypeError("key agreement needs a DH key pair")
    try:
        shared = private.private.exchange(X25519PublicKey.from_public_bytes(bytes(peer_public)))
    except ValueError as exc:
        raise AuthenticationError(f"bad DH public value: {exc}") from None
    return derive_key(shared, info, role)


@dataclass(frozen=True)
class Certificate:
    subject: str
    subject_public_key: bytes
    issuer: str
    signature: bytes = field(repr=False)

    def body(self):
        return encode(self.subject, self.subject_public_key, self.issuer)

    def to_bytes(self):
        return encode(self.body(), self.signature)

    @classmethod
    def from_bytes(cls, raw):
        try:
            body, signature = decode(raw, 2)
            subject, pub, issuer = decode(body, 3)
            return cls(as_str(subject), pub, as_str(issuer), signature)
        except DecodeError as exc:
            raise ValueError(f"malformed certificate: {exc}") from None

    def to_dict(self):
        return {
            "subject": self.subject,
            "subject_public_key": self.subject_public_key.hex(),
            "issuer": self.issuer,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["subject"],
            bytes.fromhex(d["subject_public_key"]),
            d["issuer"],
            bytes.fromhex(d["signature"]),
        )


def issue_certificate(issuer_key: KeyPair, issuer_name, subject_name, subject_pub) -> Certificate:
    body = encode(subject_name, bytes(subject_pub), issuer_name)
    return Certificate(subject_name, bytes(subject_pub), issuer_name, sign(issuer_key, body))


def self_signed(key: KeyPair, name) -> Certificate:
    return issue_certificate(key, name, name, key.public)


def verify_chain(chain, trusted_root: Certificate):
    """Check ``chain`` link by link, root first.

    Link 0 must be issued by ``trusted_root`` (a self-signed root may appear
    as link 0 itself); link i must be issued by link i-1. Raises
    :class:`CertificateChainError` naming the first failing link.
    """
    chain = list(chain)
    if not chain:
        raise CertificateChainError("empty chain", 0)
    issuer = trusted_root
    for index, cert in enumerate(chain):
        if not isinstance(cert, Certificate):
            raise CertificateChainError("not a certificate", index)
        if cert.issuer != issuer.subject:
            raise CertificateChainError(
                f"issuer {cert.issuer!r} does not match {issuer.subject!r}", index
            )
        if not verify(issuer.subject_public_key, cert.body(), cert.signature):
            raise CertificateChainError(f"bad signature on {cert.subject!r}", index)
        issuer = cert
    return chain[-1]


def chain_ok(chain, trusted_root) -> bool:
    try:
        verify_chain(chain, trusted_root)
    except CertificateChainError:
        return False
    return True


class CertificateAuthority:
    """Minimal issuing authority with a self-signed root."""

    def __init__(self, name="ca-root"):
        self.name = name
        self.key = KeyPair.generate(KeyPairRole.Authority)
        self.root = self_signed(self.key, name)
        self.reachable = True
        self._managers = set()

    def issue(self, subject, subject_pub):
        if not self.reachable:
            raise ConnectionError(f"certificate authority {self.name} unreachable")
        return issue_certificate(self.key, self.name, subject, subject_pub)

    def enroll_manager(self, identity):
        """Refuses a second live manager under the same identity."""
        if not self.reachable:
            raise ConnectionError(f"certificate authority {self.name} unreachable")
        if identity in self._managers:
            return False
        self._managers.add(identity)
        return True

    def release_manager(self, identity):
        self._managers.discard(identity)
