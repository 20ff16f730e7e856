"""User-side verification of an ACVM evidence bundle.

Checks run in a fixed order (certificates, quote, log replay, binding
proof, golden values) and the first failure decides the verdict.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from .agent import EventLog
from .crypto import Certificate, Digest, SymmetricKey, hmac, verify as verify_signature, verify_chain
from .errors import CertificateChainError
from .image import STAGE_PCR
from .vtpm import ALL_PCRS, PcrBank, Quote


class Failure(enum.Enum):
    ChainOfCertsInvalid = "ChainOfCertsInvalid"
    QuoteInvalid = "QuoteInvalid"
    InitMeasurementMismatch = "InitMeasurementMismatch"
    BootEventMismatch = "BootEventMismatch"
    BindingProofInvalid = "BindingProofInvalid"
    RollbackSuspected = "RollbackSuspected"
    MalformedBundle = "MalformedBundle"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    failure: Failure | None = None
    index: int | None = None
    detail: str = ""

    @classmethod
    def ok(cls):
        return cls(True, None, None, "all checks passed")

    @classmethod
    def reject(cls, failure, detail, index=None):
        return cls(False, failure, index, detail)

    @property
    def label(self):
        if self.failure is None:
            return "ACCEPTED"
        if self.failure is Failure.BootEventMismatch:
            return f"BootEventMismatch({self.index})"
        return self.failure.value

    def to_dict(self):
        return {
            "accepted": self.accepted,
            "failure": self.failure.value if self.failure else None,
            "index": self.index,
            "detail": self.detail,
        }


@dataclass
class Golden:
    init: Digest
    events: list
    expected_counter: int | None = None

    def to_dict(self):
        return {
            "init": self.init.hex(),
            "events": [e.hex() for e in self.events],
            "expected_counter": self.expected_counter,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            Digest.fromhex(d["init"]),
            [Digest.fromhex(e) for e in d["events"]],
            d.get("expected_counter"),
        )


@dataclass
class EvidenceBundle:
    acvm_id: str
    init_measurement: Digest
    event_log: EventLog
    quote: Quote
    ek_chain: list
    binding_inputs: bytes
    pcr0_prefix: list = field(default_factory=list)

    @classmethod
    def from_evidence(cls, acvm_id, init_measurement, evidence, binding_inputs):
        """Assemble from what the node returns plus the manager's disclosure."""
        return cls(
            acvm_id, Digest(init_measurement), evidence["event_log"], evidence["quote"],
            list(evidence["ek_chain"]), bytes(binding_inputs), list(evidence["pcr0_prefix"]),
        )

    def to_dict(self):
        return {
            "acvm_id": self.acvm_id,
            "init_measurement": self.init_measurement.hex(),
            "event_log": self.event_log.to_dict(),
            "quote": self.quote.to_dict(),
            "ek_chain": [c.to_dict() for c in self.ek_chain],
            "binding_inputs": self.binding_inputs.hex(),
            "pcr0_prefix": [d.hex() for d in self.pcr0_prefix],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["acvm_id"],
            Digest.fromhex(d["init_measurement"]),
            EventLog.from_dict(d["event_log"]),
            Quote.from_dict(d["quote"]),
            [Certificate.from_dict(c) for c in d["ek_chain"]],
            bytes.fromhex(d["binding_inputs"]),
            [Digest.fromhex(x) for x in d["pcr0_prefix"]],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def replay_log(event_log, mapping=STAGE_PCR, seed_pcr0=()) -> PcrBank:
    """Fold the seeded PCR0 values, then every logged event, into a fresh bank."""
    bank = PcrBank()
    for d in seed_pcr0:
        bank = bank.extend(0, d)
    events = event_log.events if isinstance(event_log, EventLog) else event_log
    for ev in events:
        bank = bank.extend(mapping[ev.stage], ev.measurement)
    return bank


def _well_formed(bundle):
    if not isinstance(bundle, EvidenceBundle):
        return "not an evidence bundle"
    if not isinstance(bundle.quote, Quote):
        return "quote missing"
    if not isinstance(bundle.event_log, EventLog):
        return "event log missing"
    if not isinstance(bundle.init_measurement, (bytes, bytearray)) or len(bundle.init_measurement) != 32:
        return "initialization measurement is not a 32-byte digest"
    if any(not isinstance(d, (bytes, bytearray)) or len(d) != 32 for d in bundle.pcr0_prefix):
        return "PCR0 prefix entry is not a digest"
    return None


def verify(bundle: EvidenceBundle, golden: Golden, vm_key: SymmetricKey, trusted_root: Certificate, nonce) -> Verdict:
    try:
        return _verify(bundle, golden, vm_key, trusted_root, bytes(nonce))
    except (ValueError, TypeError, KeyError, AttributeError, IndexError) as exc:
        return Verdict.reject(Failure.MalformedBundle, f"{type(exc).__name__}: {exc}")


def _verify(bundle, golden, vm_key, trusted_root, nonce):
    problem = _well_formed(bundle)
    if problem:
        return Verdict.reject(Failure.MalformedBundle, problem)

    # 1: EK chain
    try:
        leaf = verify_chain(bundle.ek_chain, trusted_root)
    except CertificateChainError as exc:
        return Verdict.reject(Failure.ChainOfCertsInvalid, str(exc), exc.index)

    # 2: quote signature and freshness
    q = bundle.quote
    if not verify_signature(leaf.subject_public_key, q.message(), q.signature):
        return Verdict.reject(Failure.QuoteInvalid, "quote signature does not verify under the EK")
    if q.nonce != nonce:
        return Verdict.reject(Failure.QuoteInvalid, "quote nonce is not the issued challenge")
    if golden.expected_counter is not None and q.counter != golden.expected_counter:
        return Verdict.reject(
            Failure.RollbackSuspected, f"vTPM counter {q.counter}, expected {golden.expected_counter}"
        )

    # 3: replay
    bank = replay_log(bundle.event_log, STAGE_PCR, bundle.pcr0_prefix)
    selection = list(q.pcr_selection) or list(ALL_PCRS)
    if bank.composite(selection) != q.pcr_composite:
        return Verdict.reject(Failure.QuoteInvalid, "replayed event log does not reproduce the quoted PCRs")

    # 4: binding proof, then the ACVM's own init measurement, both in PCR0
    prefix = bundle.pcr0_prefix
    if len(prefix) != 2:
        return Verdict.reject(Failure.BindingProofInvalid, f"PCR0 carries {len(prefix)} host extends, expected 2")
    if prefix[0] != hmac(vm_key, bundle.binding_inputs):
        return Verdict.reject(Failure.BindingProofInvalid, "PCR0 binding value is not HMAC(vm_key, host boot measurements)")
    if prefix[1] != golden.init:
        return Verdict.reject(Failure.InitMeasurementMismatch, "PCR0 init value differs from the golden measurement")

    # 5
    if bundle.init_measurement != golden.init:
        return Verdict.reject(Failure.InitMeasurementMismatch, "initialization measurement differs from golden")

    # 6
    events = bundle.event_log.events
    for i, expected in enumerate(golden.events, start=1):
        if i > len(events):
            return Verdict.reject(Failure.BootEventMismatch, f"boot event {i} missing", i)
        if events[i - 1].measurement != expected:
            return Verdict.reject(Failure.BootEventMismatch, f"boot event {i} differs from golden", i)
    if len(events) > len(golden.events):
        n = len(golden.events) + 1
        return Verdict.reject(Failure.BootEventMismatch, f"unexpected boot event {n}", n)
    return Verdict.ok()
