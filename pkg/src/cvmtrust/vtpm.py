"""Software TPM: PCR bank, sealed persistent state, quotes, command dispatch."""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field

from . import tpmcmd
from .crypto import (
    Certificate,
    Digest,
    KeyPair,
    KeyPairRole,
    KeyRole,
    SymmetricKey,
    aead_open,
    aead_seal,
    hash,
    issue_certificate,
    sign,
    verify,
)
from .encoding import DecodeError, as_int, as_str, decode, decode_list, encode, encode_list
from .errors import (
    AuthenticationError,
    BindingViolation,
    MalformedState,
    PcrIndexError,
    RollbackDetected,
)
from .tpmcmd import CommandCode, ResponseCode

NUM_PCRS = 24
ALL_PCRS = tuple(range(NUM_PCRS))
STATE_FORMAT_VERSION = 1
SEALED_BLOB_VERSION = 1
_BLOB_HEADER = struct.Struct(">BQ")


@dataclass(frozen=True)
class PcrBank:
    registers: tuple = field(default_factory=lambda: (Digest.zero(),) * NUM_PCRS)

    def __post_init__(self):
        if len(self.registers) != NUM_PCRS:
            raise ValueError(f"a PCR bank has {NUM_PCRS} registers")

    def __getitem__(self, index):
        return self.registers[_check_index(index)]

    def extend(self, index, measurement):
        return pcr_extend(self, index, measurement)

    def composite(self, selection=ALL_PCRS):
        return pcr_composite(self, selection)


def _check_index(index):
    if not isinstance(index, int) or not 0 <= index < NUM_PCRS:
        raise PcrIndexError(f"PCR index {index!r} outside 0..{NUM_PCRS - 1}")
    return index


def pcr_extend(bank: PcrBank, index: int, measurement) -> PcrBank:
    _check_index(index)
    measurement = Digest(measurement)
    regs = list(bank.registers)
    regs[index] = hash(regs[index] + measurement)
    return PcrBank(tuple(regs))


def pcr_composite(bank, selection):
    """Hash of the selected registers concatenated in ascending index order."""
    indices = sorted(set(selection))
    if not indices:
        raise ValueError("empty PCR selection")
    return hash(b"".join(bank[i] for i in indices))


@dataclass
class MonotonicCounter:
    value: int = 0

    def increment(self):
        if self.value >= 2**64 - 1:
            raise OverflowError("counter exhausted")
        self.value += 1
        return self.value


@dataclass
class TpmStateFile:
    vtpm_id: str
    endorsement: KeyPair
    ek_certificate: Certificate
    counter: MonotonicCounter = field(default_factory=MonotonicCounter)
    persistent_objects: dict = field(default_factory=dict)
    format_version: int = STATE_FORMAT_VERSION

    def to_bytes(self):
        objects = encode_list([encode(k, v) for k, v in sorted(self.persistent_objects.items())])
        return encode(
            self.format_version,
            self.vtpm_id,
            self.endorsement.private_bytes(),
            self.ek_certificate.to_bytes(),
            self.counter.value,
            objects,
        )

    @classmethod
    def from_bytes(cls, raw):
        try:
            version, vtpm_id, ek, cert, counter, objects = decode(raw, 6)
            version = as_int(version)
            if version != STATE_FORMAT_VERSION:
                raise MalformedState(f"unsupported state format {version}")
            items = {}
            for item in decode_list(objects):
                key, value = decode(item, 2)
                items[as_str(key)] = value
            return cls(
                vtpm_id=as_str(vtpm_id),
                endorsement=KeyPair.from_private_bytes(ek, KeyPairRole.Endorsement),
                ek_certificate=Certificate.from_bytes(cert),
                counter=MonotonicCounter(as_int(counter)),
                persistent_objects=items,
                format_version=version,
            )
        except (DecodeError, ValueError) as exc:
            raise MalformedState(f"state file does not parse: {exc}") from None

    def __eq__(self, other):
        if not isinstance(other, TpmStateFile):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def _state_aad(version, acvm_id, counter_value):
    return encode(b"vtpm-state", version, acvm_id, counter_value)


def seal_state(state: TpmStateFile, vm_key: SymmetricKey, acvm_id, counter_value):
    """Seal ``state`` for one VM at one counter value.

    Layout: ``version:u8 || counter:u64be || nonce[12] || ciphertext || tag[16]``.
    The VM identity and counter are bound through the AEAD associated data;
    the counter is also carried in clear so a stale blob is reported as a
    rollback rather than a generic failure.
    """
    if vm_key.role is not KeyRole.VmKey:
        raise ValueError("state files are sealed under a VmKey")
    header = _BLOB_HEADER.pack(SEALED_BLOB_VERSION, counter_value)
    aad = _state_aad(SEALED_BLOB_VERSION, acvm_id, counter_value)
    return header + aead_seal(vm_key, state.to_bytes(), aad)


def unseal_state(blob, vm_key: SymmetricKey, acvm_id, expected_counter) -> TpmStateFile:
    blob = bytes(blob)
    if len(blob) < _BLOB_HEADER.size:
        raise MalformedState("sealed state blob truncated")
    version, counter = _BLOB_HEADER.unpack_from(blob)
    if version != SEALED_BLOB_VERSION:
        raise MalformedState(f"unknown sealed state version {version}")
    try:
        plain = aead_open(vm_key, blob[_BLOB_HEADER.size:], _state_aad(version, acvm_id, counter))
    except AuthenticationError:
        raise BindingViolation(f"state file is not bound to {acvm_id!r} under this VM key") from None
    if counter != expected_counter:
        raise RollbackDetected(f"state counter {counter}, expected {expected_counter}")
    state = TpmStateFile.from_bytes(plain)
    if state.counter.value != expected_counter:
        raise RollbackDetected(
            f"state file counter {state.counter.value}, expected {expected_counter}"
        )
    return state


def sealed_counter(blob):
    """Counter value claimed by a sealed blob's clear header (unauthenticated)."""
    return _BLOB_HEADER.unpack_from(blob)[1]


@dataclass(frozen=True)
class Quote:
    pcr_selection: tuple
    pcr_composite: Digest
    nonce: bytes
    counter: int
    signature: bytes = field(repr=False)

    def message(self):
        return quote_message(self.pcr_selection, self.pcr_composite, self.nonce, self.counter)

    def to_bytes(self):
        return encode(
            encode_list([encode(i) for i in self.pcr_selection]),
            self.pcr_composite,
            self.nonce,
            self.counter,
            self.signature,
        )

    @classmethod
    def from_bytes(cls, raw):
        sel, composite, nonce, counter, sig = decode(raw, 5)
        selection = tuple(as_int(decode(s, 1)[0]) for s in decode_list(sel))
        return cls(selection, Digest(composite), nonce, as_int(counter), sig)

    def to_dict(self):
        return {
            "pcr_selection": list(self.pcr_selection),
            "pcr_composite": self.pcr_composite.hex(),
            "nonce": self.nonce.hex(),
            "counter": self.counter,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(int(i) for i in d["pcr_selection"]),
            Digest.fromhex(d["pcr_composite"]),
            bytes.fromhex(d["nonce"]),
            int(d["counter"]),
            bytes.fromhex(d["signature"]),
        )


def quote_message(selection, composite, nonce, counter):
    sel = encode_list([encode(i) for i in selection])
    return encode(b"vtpm-quote", sel, composite, nonce, counter)


def quote(bank: PcrBank, selection, nonce, ek: KeyPair, counter) -> Quote:
    selection = tuple(sorted(set(selection)))
    if not selection:
        raise ValueError("quote needs a non-empty PCR selection")
    for i in selection:
        _check_index(i)
    composite = pcr_composite(bank, selection)
    nonce = bytes(nonce)
    sig = sign(ek, quote_message(selection, composite, nonce, counter))
    return Quote(selection, composite, nonce, counter, sig)


def verify_quote(q: Quote, ek_pub, bank: PcrBank, nonce) -> bool:
    """Accept iff signature, nonce and the expected registers all match."""
    if bytes(nonce) != q.nonce:
        return False
    if not verify(ek_pub, q.message(), q.signature):
        return False
    try:
        return pcr_composite(bank, q.pcr_selection) == q.pcr_composite
    except (ValueError, PcrIndexError):
        return False


class Vtpm:
    """One vTPM instance. Commands are processed strictly one at a time."""

    def __init__(self, state: TpmStateFile, cert_chain=()):
        self.state = state
        self.bank = PcrBank()
        # extends performed by the hosting service (binding proof, init measurement)
        self.bind_events = []
        self.cert_chain = list(cert_chain) or [state.ek_certificate]
        self._lock = threading.Lock()

    @property
    def vtpm_id(self):
        return self.state.vtpm_id

    @property
    def counter(self):
        return self.state.counter.value

    def extend(self, index, measurement):
        with self._lock:
            self.bank = pcr_extend(self.bank, index, measurement)

    def host_extend(self, index, measurement):
        self.extend(index, measurement)
        self.bind_events.append((index, Digest(measurement)))

    def quote(self, nonce, selection=ALL_PCRS):
        with self._lock:
            return quote(self.bank, selection, nonce, self.state.endorsement, self.counter)

    def execute(self, command: bytes) -> bytes:
        try:
            code, params = tpmcmd.parse(command)
        except tpmcmd.CommandFormatError:
            return tpmcmd.response(ResponseCode.FAILURE)
        handler = self._handlers.get(code)
        if handler is None:
            return tpmcmd.response(ResponseCode.COMMAND_CODE)
        with self._lock:
            try:
                return handler(self, *params)
            except (TypeError, ValueError, DecodeError):
                return tpmcmd.response(ResponseCode.VALUE)

    # command handlers run with the instance lock held

    def _get_random(self, n):
        n = as_int(n)
        if n > 1024:
            return tpmcmd.response(ResponseCode.VALUE)
        return tpmcmd.response(ResponseCode.SUCCESS, os.urandom(n))

    def _pcr_read(self, *indices):
        try:
            values = [self.bank[as_int(i)] for i in indices]
        except PcrIndexError:
            return tpmcmd.response(ResponseCode.VALUE)
        return tpmcmd.response(ResponseCode.SUCCESS, *values)

    def _pcr_extend(self, index, digest):
        try:
            self.bank = pcr_extend(self.bank, as_int(index), Digest(digest))
        except PcrIndexError:
            return tpmcmd.response(ResponseCode.VALUE)
        return tpmcmd.response(ResponseCode.SUCCESS)

    def _hash(self, data):
        return tpmcmd.response(ResponseCode.SUCCESS, hash(data))

    def _create(self):
        key = KeyPair.generate(KeyPairRole.Object)
        objects = self.state.persistent_objects
        handle = f"key:{len(objects):04d}"
        objects[handle] = key.private_bytes()
        return tpmcmd.response(ResponseCode.SUCCESS, handle, key.public)

    def _object(self, handle):
        raw = self.state.persistent_objects.get(as_str(handle))
        return None if raw is None else KeyPair.from_private_bytes(raw, KeyPairRole.Object)

    def _sign(self, handle, digest):
        key = self._object(handle)
        if key is None:
            return tpmcmd.response(ResponseCode.HANDLE)
        return tpmcmd.response(ResponseCode.SUCCESS, sign(key, Digest(digest)))

    def _verify_signature(self, handle, digest, signature):
        key = self._object(handle)
        if key is None:
            return tpmcmd.response(ResponseCode.HANDLE)
        if not verify(key.public, digest, signature):
            return tpmcmd.response(ResponseCode.SIGNATURE)
        return tpmcmd.response(ResponseCode.SUCCESS)

    def _quote(self, nonce, *indices):
        selection = [as_int(i) for i in indices] or list(ALL_PCRS)
        try:
            q = quote(self.bank, selection, nonce, self.state.endorsement, self.counter)
        except (ValueError, PcrIndexError):
            return tpmcmd.response(ResponseCode.VALUE)
        return tpmcmd.response(ResponseCode.SUCCESS, q.to_bytes())

    def _evidence(self, nonce):
        q = quote(self.bank, ALL_PCRS, nonce, self.state.endorsement, self.counter)
        chain = encode_list([c.to_bytes() for c in self.cert_chain])
        binds = encode_list([encode(i, d) for i, d in self.bind_events])
        return tpmcmd.response(ResponseCode.SUCCESS, q.to_bytes(), chain, binds)

    _handlers = {
        CommandCode.GetRandom: _get_random,
        CommandCode.PCR_Read: _pcr_read,
        CommandCode.PCR_Extend: _pcr_extend,
        CommandCode.Hash: _hash,
        CommandCode.Create: _create,
        CommandCode.Sign: _sign,
        CommandCode.VerifySignature: _verify_signature,
        CommandCode.Quote: _quote,
        CommandCode.Vendor_Evidence: _evidence,
    }


def create_vtpm(tpmcvm_root: KeyPair, vtpm_id, issuer_name="tpmcvm-root", parent_chain=()):
    """Create a fresh vTPM: new EK, EK certificate signed by the host root, counter 0."""
    ek = KeyPair.generate(KeyPairRole.Endorsement)
    cert = issue_certificate(tpmcvm_root, issuer_name, f"ek:{vtpm_id}", ek.public)
    state = TpmStateFile(vtpm_id=vtpm_id, endorsement=ek, ek_certificate=cert)
    return Vtpm(state, [*parent_chain, cert]), cert


def parse_evidence(params):
    """Decode the vendor evidence response into (quote, chain, bind events)."""
    q_raw, chain_raw, binds_raw = params
    chain = [Certificate.from_bytes(c) for c in decode_list(chain_raw)]
    binds = []
    for item in decode_list(binds_raw):
        i, d = decode(item, 2)
        binds.append((as_int(i), Digest(d)))
    return Quote.from_bytes(q_raw), chain, binds


__all__ = [
    "NUM_PCRS",
    "ALL_PCRS",
    "PcrBank",
    "MonotonicCounter",
    "TpmStateFile",
    "Quote",
    "Vtpm",
    "pcr_extend",
    "pcr_composite",
    "seal_state",
    "unseal_state",
    "quote",
    "verify_quote",
    "create_vtpm",
]
