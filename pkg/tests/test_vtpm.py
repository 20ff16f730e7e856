import hashlib

import pytest
from hypothesis import given, strategies as st

from cvmtrust import tpmcmd
from cvmtrust.crypto import Digest, KeyPair, KeyPairRole, KeyRole, SymmetricKey, hash, verify
from cvmtrust.errors import BindingViolation, MalformedState, PcrIndexError, RollbackDetected
from cvmtrust.tpmcmd import CommandCode, ResponseCode
from cvmtrust.vtpm import (
    NUM_PCRS,
    PcrBank,
    TpmStateFile,
    create_vtpm,
    parse_evidence,
    pcr_composite,
    pcr_extend,
    seal_state,
    sealed_counter,
    unseal_state,
    verify_quote,
)

ZERO = b"\0" * 32


def oracle_extend(old, m):
    return hashlib.sha256(old + m).digest()


def test_extend_once_from_zero():
    m = hash(b"m")
    assert pcr_extend(PcrBank(), 0, m)[0] == hashlib.sha256(ZERO + m).digest()


@given(st.lists(st.tuples(st.integers(0, NUM_PCRS - 1), st.binary(min_size=32, max_size=32)), max_size=20))
def test_extend_fold_matches_oracle(ops):
    bank = PcrBank()
    regs = [ZERO] * NUM_PCRS
    for i, m in ops:
        bank = pcr_extend(bank, i, Digest(m))
        regs[i] = oracle_extend(regs[i], m)
    assert [bytes(bank[i]) for i in range(NUM_PCRS)] == regs


def test_extend_order_matters():
    a, b = hash(b"a"), hash(b"b")
    assert PcrBank().extend(3, a).extend(3, b)[3] != PcrBank().extend(3, b).extend(3, a)[3]


@pytest.mark.parametrize("index", [-1, 24, 100])
def test_extend_index_out_of_range(index):
    with pytest.raises(PcrIndexError):
        pcr_extend(PcrBank(), index, hash(b"x"))


def test_composite_oracle():
    bank = PcrBank().extend(1, hash(b"x")).extend(7, hash(b"y"))
    expect = hashlib.sha256(b"".join(bytes(bank[i]) for i in (1, 7))).digest()
    assert pcr_composite(bank, [7, 1]) == expect
    with pytest.raises(PcrIndexError):
        pcr_composite(bank, [30])


def _vtpm(vid="vtpm:a"):
    root = KeyPair.generate(KeyPairRole.TpmcvmRoot)
    return create_vtpm(root, vid)


def test_state_file_roundtrip():
    vtpm, cert = _vtpm()
    vtpm.state.persistent_objects["nv:1"] = b"data"
    raw = vtpm.state.to_bytes()
    assert TpmStateFile.from_bytes(raw) == vtpm.state
    assert cert.subject == "ek:vtpm:a"


def test_seal_unseal_and_failures():
    vtpm, _ = _vtpm()
    key = SymmetricKey.generate(KeyRole.VmKey)
    vtpm.state.counter.increment()
    blob = seal_state(vtpm.state, key, "a", 1)
    assert sealed_counter(blob) == 1
    assert unseal_state(blob, key, "a", 1) == vtpm.state
    with pytest.raises(BindingViolation):
        unseal_state(blob, SymmetricKey.generate(KeyRole.VmKey), "a", 1)
    with pytest.raises(BindingViolation):
        unseal_state(blob, key, "b", 1)
    with pytest.raises(RollbackDetected):
        unseal_state(blob, key, "a", 2)
    with pytest.raises(MalformedState):
        unseal_state(b"\x01", key, "a", 1)
    forged = bytearray(blob)
    forged[8] ^= 1  # clear header counter: authenticated via the AAD
    with pytest.raises(BindingViolation):
        unseal_state(bytes(forged), key, "a", 1)


def test_seal_requires_vm_key():
    vtpm, _ = _vtpm()
    with pytest.raises(ValueError):
        seal_state(vtpm.state, SymmetricKey.generate(KeyRole.SessionKey), "a", 0)


def test_quote_verifies_and_binds_nonce():
    vtpm, cert = _vtpm()
    vtpm.extend(8, hash(b"kernel"))
    q = vtpm.quote(b"nonce-1")
    assert verify_quote(q, cert.subject_public_key, vtpm.bank, b"nonce-1")
    assert not verify_quote(q, cert.subject_public_key, vtpm.bank, b"nonce-2")
    assert not verify_quote(q, cert.subject_public_key, vtpm.bank.extend(8, hash(b"x")), b"nonce-1")
    assert verify(cert.subject_public_key, q.message(), q.signature)
    assert type(q).from_bytes(q.to_bytes()) == q


def run(vtpm, code, *params):
    return tpmcmd.parse(vtpm.execute(tpmcmd.build(code, *params)))


def test_command_dispatch():
    vtpm, cert = _vtpm()
    rc, (rnd,) = run(vtpm, CommandCode.GetRandom, 16)
    assert rc == ResponseCode.SUCCESS and len(rnd) == 16
    rc, (h,) = run(vtpm, CommandCode.Hash, b"abc")
    assert h == hashlib.sha256(b"abc").digest()
    m = hash(b"m")
    assert run(vtpm, CommandCode.PCR_Extend, 10, m)[0] == ResponseCode.SUCCESS
    rc, (v,) = run(vtpm, CommandCode.PCR_Read, 10)
    assert v == oracle_extend(ZERO, m)
    rc, (handle, pub) = run(vtpm, CommandCode.Create)
    rc, (sig,) = run(vtpm, CommandCode.Sign, handle, m)
    assert verify(pub, m, sig)
    assert run(vtpm, CommandCode.VerifySignature, handle, m, sig)[0] == ResponseCode.SUCCESS
    assert run(vtpm, CommandCode.VerifySignature, handle, hash(b"n"), sig)[0] == ResponseCode.SIGNATURE
    assert run(vtpm, CommandCode.Sign, b"key:9999", m)[0] == ResponseCode.HANDLE
    assert run(vtpm, CommandCode.PCR_Read, 99)[0] == ResponseCode.VALUE
    rc, params = run(vtpm, CommandCode.Vendor_Evidence, b"n")
    q, chain, binds = parse_evidence(params)
    assert chain[-1] == cert and binds == [] and q.nonce == b"n"


def test_unknown_and_malformed_commands():
    vtpm, _ = _vtpm()
    assert tpmcmd.parse(vtpm.execute(tpmcmd.build(0x999)))[0] == ResponseCode.COMMAND_CODE
    assert tpmcmd.parse(vtpm.execute(b"\x00"))[0] == ResponseCode.FAILURE


def test_host_extend_recorded_as_bind_event():
    vtpm, _ = _vtpm()
    d = hash(b"proof")
    vtpm.host_extend(0, d)
    assert vtpm.bind_events == [(0, d)]
