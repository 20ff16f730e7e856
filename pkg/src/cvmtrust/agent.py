"""Guest-side TPM driver: boot measurement and TPM command wrapping.

In a vTPM-host guest the agent seals every measurement under the measure
key and streams it to the manager. In an application guest it sends each
measurement as a wrapped PCR_Extend to the bound vTPM.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field

from . import tpmcmd
from .channel import GUEST_TO_VTPM, SessionCipher
from .crypto import Digest, KeyRole, SymmetricKey, aead_seal, hash
from .encoding import as_int, as_str, decode, encode, encode_list
from .errors import ChannelAuthenticationFailed, ChannelIntegrityError, InvalidState, StageOrderError
from .image import BootStage, parse_payload
from .tpmcmd import CommandCode, ResponseCode
from .transport import Frame, FrameType

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootEvent:
    sequence: int
    stage: BootStage
    description: str
    measurement: Digest

    def to_bytes(self):
        return encode(self.sequence, self.stage.value, self.description, self.measurement)

    @classmethod
    def from_bytes(cls, raw):
        seq, stage, desc, meas = decode(raw, 4)
        return cls(as_int(seq), BootStage(as_str(stage)), as_str(desc), Digest(meas))

    def to_dict(self):
        return {
            "sequence": self.sequence,
            "stage": self.stage.value,
            "description": self.description,
            "measurement": self.measurement.hex(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["sequence"]), BootStage(d["stage"]), d.get("description", ""), Digest.fromhex(d["measurement"]))


@dataclass
class EventLog:
    subject_id: str
    launch_nonce: bytes = b""
    events: list = field(default_factory=list)

    def to_bytes(self):
        return encode(self.subject_id, self.launch_nonce, encode_list([e.to_bytes() for e in self.events]))

    def to_dict(self):
        return {
            "header": {"subject": self.subject_id, "launch_nonce": self.launch_nonce.hex()},
            "events": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_dict(cls, d):
        header = d["header"]
        return cls(
            header["subject"],
            bytes.fromhex(header.get("launch_nonce", "")),
            [BootEvent.from_dict(e) for e in d["events"]],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


class AgentMode(enum.Enum):
    TPMCVM = "tpmcvm"
    ACVM = "acvm"


def event_aad(subject_id, sequence):
    return encode(b"boot-event", subject_id, sequence)


class GuestAgent:
    def __init__(self, subject_id, mode, link, *, measure_key=None, session_key=None):
        self.subject_id = subject_id
        self.mode = mode
        self.link = link
        self._measure_key = measure_key
        self._session = None
        if mode is AgentMode.TPMCVM:
            if measure_key is None or measure_key.role is not KeyRole.MeasureKey:
                raise ValueError("TPMCVM mode needs the measure key")
        elif session_key is not None:
            self.install_session_key(session_key)
        self.log = EventLog(subject_id, os.urandom(16))
        self._finished = False

    @classmethod
    def for_tpmcvm(cls, subject_id, measure_key, link):
        return cls(subject_id, AgentMode.TPMCVM, link, measure_key=measure_key)

    @classmethod
    def for_acvm(cls, subject_id, session_key, link):
        return cls(subject_id, AgentMode.ACVM, link, session_key=session_key)

    def install_session_key(self, key: SymmetricKey):
        self._session = SessionCipher(key, self.subject_id, GUEST_TO_VTPM)

    @property
    def session_key(self):
        return None if self._session is None else self._session._key

    def measure_stage(self, stage, content, description="") -> BootEvent:
        stage = BootStage(stage)
        if self._finished:
            raise InvalidState("boot already finished")
        if self.log.events and stage.order < self.log.events[-1].stage.order:
            raise StageOrderError(f"{stage.value} after {self.log.events[-1].stage.value}")
        event = BootEvent(len(self.log.events) + 1, stage, description, hash(content))
        self.log.events.append(event)
        if self.mode is AgentMode.TPMCVM:
            self._stream(FrameType.EVENT, event.sequence, event.to_bytes())
        else:
            self.pcr_extend(stage.pcr, event.measurement)
        return event

    def _stream(self, ftype, seq, plaintext):
        blob = aead_seal(self._measure_key, plaintext, event_aad(self.subject_id, seq))
        reply = self.link.request(ftype, encode(self.subject_id, seq, blob))
        if reply.type is not FrameType.ACK:
            raise ChannelAuthenticationFailed(f"measurement {seq} not acknowledged")

    def finish(self):
        """Close the measurement stream (TPMCVM mode)."""
        if self.mode is AgentMode.TPMCVM:
            n = len(self.log.events)
            self._stream(FrameType.EVENT_DONE, n + 1, encode(b"done", n))
        self._finished = True

    def wrap_command(self, raw) -> bytes:
        if self._session is None:
            raise InvalidState("no session key installed")
        return self._session.wrap(raw)

    def unwrap_response(self, frame) -> bytes:
        if self._session is None:
            raise InvalidState("no session key installed")
        try:
            return self._session.unwrap(frame)
        except ChannelAuthenticationFailed as exc:
            raise ChannelIntegrityError(str(exc)) from None

    def transact(self, raw) -> bytes:
        """Send one TPM command and return the raw response."""
        frame = self.link.send(Frame(FrameType.WRAPPED, self.wrap_command(raw)))
        if frame.type is not FrameType.WRAPPED:
            raise ChannelIntegrityError("wrapped command dropped by the vTPM")
        return self.unwrap_response(frame.payload)

    def command(self, code, *params):
        rc, out = tpmcmd.parse(self.transact(tpmcmd.build(code, *params)))
        return rc, out

    def pcr_extend(self, index, digest):
        rc, _ = self.command(CommandCode.PCR_Extend, index, Digest(digest))
        if rc != ResponseCode.SUCCESS:
            raise ChannelIntegrityError(f"PCR_Extend failed with rc {rc:#x}")

    def pcr_read(self, *indices):
        rc, out = self.command(CommandCode.PCR_Read, *indices)
        if rc != ResponseCode.SUCCESS:
            raise ValueError(f"PCR_Read failed with rc {rc:#x}")
        return [Digest(d) for d in out]

    def export_event_log(self) -> EventLog:
        return EventLog(self.log.subject_id, self.log.launch_nonce, list(self.log.events))


class AcvmGuest:
    """The user's application VM: secret intake, measured boot, attestation."""

    kind = "acvm"

    def __init__(self, image, env):
        self._image = image
        self._env = env
        self.status = "pre-boot"
        self.alerts = []
        self.agent = None
        self._secret = None

    def deliver_secret(self, plaintext):
        if self.status != "pre-boot":
            raise InvalidState("secret injection after boot")
        acvm_id, key = decode(plaintext, 2)
        self._secret = (as_str(acvm_id), SymmetricKey(key, KeyRole.SessionKey))

    def boot(self):
        if self._secret is None:
            raise InvalidState("no session key injected")
        acvm_id, session_key = self._secret
        self.status = "running"
        self.agent = GuestAgent.for_acvm(acvm_id, session_key, self._env.tpm_link())
        stages, _ = parse_payload(self._image.payload_region)
        try:
            for s in stages:
                self.agent.measure_stage(s.stage, s.content, s.label)
            self.agent.finish()
        except ChannelAuthenticationFailed as exc:
            self._halt(exc)
        return self.status

    def _halt(self, exc):
        log.warning("guest %s halted: %s", self._env.handle, exc)
        self.alerts.append({"code": exc.code, "detail": str(exc)})
        self.status = "halted"

    def attest(self, nonce):
        """Quote plus supporting material; raises if the guest halted."""
        if self.status != "running":
            raise ChannelIntegrityError(
                self.alerts[-1]["detail"] if self.alerts else f"guest is {self.status}"
            )
        try:
            rc, out = self.agent.command(CommandCode.Vendor_Evidence, bytes(nonce))
        except ChannelAuthenticationFailed as exc:
            self._halt(exc)
            raise
        if rc != ResponseCode.SUCCESS:
            raise ChannelIntegrityError(f"evidence command failed rc {rc:#x}")
        return out, self.agent.export_event_log()

    def stop(self):
        self.status = "stopped"
