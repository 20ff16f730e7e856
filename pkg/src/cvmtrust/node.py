"""Untrusted cloud node: hypervisor operations, mock secure processor, adversary.

Guest actors (:class:`~cvmtrust.tpmcvm.TpmcvmService`,
:class:`~cvmtrust.agent.AcvmGuest`) live behind their handles. Node code
only ever touches what crosses its wires, and records every such frame.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field

from .agent import AcvmGuest, BootEvent, EventLog
from .crypto import (
    Digest,
    KeyPair,
    KeyPairRole,
    aead_open,
    agree,
    hash,
    issue_certificate,
    self_signed,
    sign,
    verify,
)
from .encoding import decode, encode
from .errors import AuthenticationError, ChannelIntegrityError, InvalidState
from .image import CvmImage, measure_image_init
from .tpmcvm import TpmcvmService
from .transport import SEALED_TYPES, Frame, FrameType, TappedLink
from .vtpm import create_vtpm, parse_evidence, sealed_counter
from . import tpmcmd

log = logging.getLogger(__name__)


def secret_info(handle, measurement):
    return encode(b"sev-launch-secret", handle, measurement)


@dataclass(frozen=True)
class LaunchReport:
    handle: str
    measurement: Digest
    signature: bytes = field(repr=False)

    def message(self):
        return encode(b"launch-measure", self.handle, self.measurement)


@dataclass(frozen=True)
class PlatformIdentity:
    chain: tuple

    @property
    def signing_key(self):
        """Chip endorsement key that signs launch reports."""
        return self.chain[-2].subject_public_key

    @property
    def dh_public(self):
        return self.chain[-1].subject_public_key


def verify_launch_report(report: LaunchReport, platform: PlatformIdentity) -> bool:
    return verify(platform.signing_key, report.message(), report.signature)


class SecureProcessor:
    """Mock AMD secure processor: launch measurement and secret injection."""

    def __init__(self, root_name="amd-ark"):
        self._ark = KeyPair.generate(KeyPairRole.Platform)
        self._ask = KeyPair.generate(KeyPairRole.Platform)
        self._cek = KeyPair.generate(KeyPairRole.Platform)
        self._pdh = KeyPair.generate(KeyPairRole.PlatformDh)
        ark_cert = self_signed(self._ark, root_name)
        ask_cert = issue_certificate(self._ark, root_name, "amd-ask", self._ask.public)
        cek_cert = issue_certificate(self._ask, "amd-ask", "amd-cek", self._cek.public)
        pdh_cert = issue_certificate(self._cek, "amd-cek", "amd-pdh", self._pdh.public)
        self.root = ark_cert
        self.identity = PlatformIdentity((ark_cert, ask_cert, cek_cert, pdh_cert))

    def measure(self, handle, image):
        m = measure_image_init(image)
        report = LaunchReport(handle, m, b"")
        return LaunchReport(handle, m, sign(self._cek, report.message()))

    def unwrap_secret(self, handle, measurement, sealed, owner_pub):
        key = agree(self._pdh, owner_pub, secret_info(handle, measurement))
        return aead_open(key, sealed, encode(handle, measurement))


class AttackKind(enum.Enum):
    TamperImage = "TamperImage"
    SwapStateFile = "SwapStateFile"
    ReplayStateFile = "ReplayStateFile"
    RedirectVtpm = "RedirectVtpm"
    TamperChannel = "TamperChannel"
    EavesdropChannel = "EavesdropChannel"


#: Parameter used when a scenario names an attack without one.
DEFAULT_TARGET = {
    AttackKind.TamperImage: "acvm",
    AttackKind.RedirectVtpm: "cotenant",
    AttackKind.TamperChannel: "measurement",
    AttackKind.EavesdropChannel: "measurement",
}

CHANNELS = ("measurement", "mvtpm", "session")


@dataclass(frozen=True)
class Attack:
    kind: AttackKind
    target: str | None = None

    @classmethod
    def parse(cls, value):
        if isinstance(value, Attack):
            return value
        if isinstance(value, str):
            kind, _, target = value.partition(":")
            value = {"kind": kind, "target": target or None}
        kind = AttackKind(value["kind"])
        return cls(kind, value.get("target") or DEFAULT_TARGET.get(kind))

    def to_dict(self):
        return {"kind": self.kind.value, "target": self.target}


@dataclass(frozen=True)
class AdversaryConfig:
    attacks: tuple = ()

    @classmethod
    def none(cls):
        return cls(())

    @classmethod
    def parse(cls, values):
        if values is None or values == "None":
            return cls.none()
        if isinstance(values, (str, dict)):
            values = [values]
        return cls(tuple(Attack.parse(s) for s in values if s not in ("None", None)))

    def get(self, kind):
        for a in self.attacks:
            if a.kind is kind:
                return a
        return None

    def __bool__(self):
        return bool(self.attacks)


class GuestEnv:
    """What a guest can reach: node-routed links and its own endpoints."""

    def __init__(self, node, handle):
        self._node = node
        self.handle = handle

    def link(self, channel, endpoint):
        return self._node.link(channel, endpoint)

    def serve(self, endpoint, handler):
        self._node.network.serve(endpoint, handler)

    def tpm_link(self):
        return self._node._tpm_link(self.handle)


@dataclass
class _Slot:
    guest: object
    label: str
    kind: str
    report: LaunchReport
    tpm_endpoint: str | None = None
    redirected: bool = False
    images: dict = field(default_factory=dict)


class CloudNode:
    def __init__(self, network, name="cloud-node", adversary=None, platform=None):
        self.name = name
        self.network = network
        self.sp = platform or SecureProcessor()
        self.adversary = AdversaryConfig.none()
        self.trace = []
        self.captured = []
        self.eavesdropped = []
        self.storage = {}
        self.rogue = None
        self._slots = {}
        self._ids = itertools.count(1)
        self._t0 = time.monotonic()
        self._context = None
        self._blobs = {}
        self._tampered = False
        self._started = False
        if adversary:
            self.apply_adversary(adversary)

    # trace

    def record(self, actor, event, data_class="plaintext", summary=""):
        self.trace.append(
            {
                "time": round(time.monotonic() - self._t0, 6),
                "actor": actor,
                "event": event,
                "data_class": data_class,
                "summary": summary,
            }
        )

    def trace_lines(self):
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.trace)

    def apply_adversary(self, config):
        if self._started:
            raise InvalidState("adversary hooks must be installed before the scenario starts")
        self.adversary = AdversaryConfig.parse(config) if not isinstance(config, AdversaryConfig) else config
        for a in self.adversary.attacks:
            self.record("adversary", f"install:{a.kind.value}", "plaintext", str(a.target))

    # hypervisor API

    def platform_identity(self) -> PlatformIdentity:
        return self.sp.identity

    def launch_cvm(self, image: CvmImage, label=None):
        self._started = True
        handle = f"cvm-{next(self._ids)}"
        image = image.copy()
        label = label or image.name
        tamper = self.adversary.get(AttackKind.TamperImage)
        if tamper and tamper.target in (image.kind, label) and image.uefi_region:
            region = bytearray(image.uefi_region)
            region[len(region) // 2] ^= 0x01
            image.uefi_region = bytes(region)
            self.record("adversary", "tamper-image", "plaintext", f"{handle} uefi byte flipped")
        report = self.sp.measure(handle, image)
        env = GuestEnv(self, handle)
        guest = TpmcvmService(image, env) if image.kind == "tpmcvm" else AcvmGuest(image, env)
        self._slots[handle] = _Slot(guest, label, image.kind, report, images={"image": image})
        if image.kind == "acvm":
            self._context = label
        self.record("node", "launch", "plaintext", f"{handle} {image.kind} {label} m={report.measurement.hex()[:12]}")
        return handle, report

    def inject_secret(self, handle, sealed, owner_pub):
        slot = self._slot(handle)
        self.record("node", "inject-secret", "ciphertext", f"{handle} {len(sealed)} bytes")
        self.captured.append(("inject", handle, bytes(sealed)))
        if slot.guest.status != "pre-boot":
            raise InvalidState(f"{handle} is not in pre-boot state")
        try:
            plain = self.sp.unwrap_secret(handle, slot.report.measurement, sealed, owner_pub)
        except AuthenticationError as exc:
            raise AuthenticationError(f"secret rejected by secure processor: {exc}") from None
        slot.guest.deliver_secret(plain)
        return True

    def start(self, handle):
        slot = self._slot(handle)
        status = slot.guest.boot()
        self.record("node", "guest-status", "plaintext", f"{handle} {status}")
        return status

    def guest_endpoints(self, handle):
        guest = self._slot(handle).guest
        return guest.mvtpm_endpoint, guest.vtpm_endpoint

    def bind_vtpm(self, handle, endpoint):
        slot = self._slot(handle)
        slot.tpm_endpoint = endpoint
        if self.adversary.get(AttackKind.RedirectVtpm) and self.rogue is not None:
            slot.redirected = True
            self.rogue.target = slot
            self.record("adversary", "redirect-vtpm", "plaintext", f"{handle} -> rogue ({self.rogue.mode})")
        self.record("node", "bind-vtpm", "plaintext", f"{handle} -> {endpoint}")
        return endpoint

    def _tpm_link(self, handle):
        slot = self._slot(handle)
        if slot.redirected:
            return TappedLink(_HandlerLink(self.rogue.handle_frame), "session", self._tap)
        if slot.tpm_endpoint is None:
            raise InvalidState(f"{handle} has no vTPM bound")
        return self.link("session", slot.tpm_endpoint)

    def collect_evidence(self, handle, nonce):
        """Quote, chain, PCR0 prefix and event log for a running ACVM."""
        slot = self._slot(handle)
        if slot.redirected:
            self.record("adversary", "forge-evidence", "plaintext", handle)
            return self.rogue.evidence(nonce, slot)
        params, event_log = slot.guest.attest(nonce)
        q, chain, binds = parse_evidence(params)
        return {"quote": q, "ek_chain": chain, "pcr0_prefix": [d for _, d in binds], "event_log": event_log}

    def stop_cvm(self, handle):
        slot = self._slot(handle)
        if slot.kind == "acvm":
            self._context = slot.label
        slot.guest.stop()
        self.record("node", "stop", "plaintext", handle)

    def destroy(self, handle):
        self._slots.pop(handle, None)
        self.record("node", "destroy", "plaintext", handle)

    def guest(self, handle):
        """Test and harness access to a guest actor (models the guest owner's view)."""
        return self._slot(handle).guest

    def _slot(self, handle):
        try:
            return self._slots[handle]
        except KeyError:
            raise InvalidState(f"no CVM {handle!r}") from None

    # wire

    def link(self, channel, endpoint):
        return TappedLink(self.network.connect(endpoint), channel, self._tap)

    def _tap(self, channel, direction, frame: Frame):
        raw = frame.pack()
        self.captured.append((channel, direction, raw))
        data_class = "ciphertext" if frame.type in SEALED_TYPES else "plaintext"
        self.record("node", f"{channel}:{direction}:{frame.type.name}", data_class, f"{len(raw)} bytes")
        spy = self.adversary.get(AttackKind.EavesdropChannel)
        if spy and spy.target == channel:
            self.eavesdropped.append(
                {"channel": channel, "direction": direction, "type": frame.type.name,
                 "data_class": data_class, "payload": frame.payload}
            )
        tamper = self.adversary.get(AttackKind.TamperChannel)
        if (tamper and tamper.target == channel and not self._tampered
                and direction == "request" and frame.type in SEALED_TYPES):
            payload = bytearray(frame.payload)
            payload[-1] ^= 0x01
            frame = Frame(frame.type, bytes(payload))
            self._tampered = True
            self.record("adversary", "tamper-channel", data_class, f"{channel} {frame.type.name} last byte flipped")
        if frame.type is FrameType.SECURE_BLOB:
            frame = self._handle_blob(direction, frame)
        return frame

    def _handle_blob(self, direction, frame):
        fields = decode(frame.payload)
        if len(fields) != 3 or not fields[2]:
            return frame
        cid, record, blob = fields
        seen = self._blobs.setdefault(self._context, [])
        if blob not in seen:
            seen.append(blob)
        if direction != "request":
            return frame
        new = blob
        swap = self.adversary.get(AttackKind.SwapStateFile)
        if swap and swap.target != self._context and self._blobs.get(swap.target):
            new = self._blobs[swap.target][-1]
            self.record("adversary", "swap-state", "ciphertext", f"{self._context} <- {swap.target}")
        replay = self.adversary.get(AttackKind.ReplayStateFile)
        if replay:
            older = [b for b in seen if sealed_counter(b) < sealed_counter(blob)]
            if older:
                new = older[0]
                self.record("adversary", "replay-state", "ciphertext",
                            f"{self._context} counter {sealed_counter(blob)} <- {sealed_counter(new)}")
        if new is blob:
            return frame
        return Frame(frame.type, encode(cid, record, new))

    # custody

    def scan_for(self, secrets):
        """Return ``(where, secret_index)`` for every plaintext hit in node-side data."""
        hits = []
        haystacks = [raw for *_, raw in self.captured]
        haystacks.append(self.trace_lines().encode())
        haystacks.append(json.dumps(self.storage, default=str).encode())
        for where, hay in enumerate(haystacks):
            for i, secret in enumerate(secrets):
                s = bytes(secret)
                if s in hay or s.hex().encode() in hay:
                    hits.append((where, i))
        return hits


class _HandlerLink:
    def __init__(self, handler):
        self._handler = handler

    def send(self, frame):
        return self._handler(frame)

    def close(self):
        pass


class RogueVtpm:
    """Adversary-run vTPM the node can redirect an ACVM to.

    ``mode="cotenant"`` drives a genuine vTPM that belongs to a colluding
    guest (certificate chain is valid, binding proof is the wrong one).
    ``mode="selfsigned"`` runs its own vTPM under an uncertified root.
    Either way it replays the victim's boot measurements, which the node can
    compute because the application image is launched in plaintext.
    """

    def __init__(self, mode="cotenant", accomplice=None):
        if mode not in ("cotenant", "selfsigned"):
            raise ValueError(f"unknown rogue mode {mode!r}")
        if mode == "cotenant" and accomplice is None:
            raise ValueError("a co-tenant rogue needs an accomplice guest")
        self.mode = mode
        self.accomplice = accomplice
        self.target = None
        self.frames_seen = 0
        self._replayed = False
        self._own = None

    def handle_frame(self, frame):
        # no session key, so the victim's commands can't be opened
        self.frames_seen += 1
        return Frame(FrameType.DROPPED, b"")

    def _victim_events(self, slot):
        image = slot.images["image"]
        return [
            BootEvent(i, s.stage, s.label, s.measurement)
            for i, s in enumerate(image.stages(), start=1)
        ]

    def evidence(self, nonce, slot):
        events = self._victim_events(slot)
        if self.mode == "cotenant":
            agent = self.accomplice.agent
            if not self._replayed:
                for ev in events:
                    agent.pcr_extend(ev.stage.pcr, ev.measurement)
                self._replayed = True
            params, _ = self.accomplice.attest(nonce)
        else:
            if self._own is None:
                root = KeyPair.generate(KeyPairRole.TpmcvmRoot)
                root_cert = self_signed(root, "rogue-root")
                vtpm, _ = create_vtpm(root, "vtpm:rogue", "rogue-root", [root_cert])
                vtpm.host_extend(0, hash(os.urandom(32)))
                vtpm.host_extend(0, slot.report.measurement)
                for ev in events:
                    vtpm.extend(ev.stage.pcr, ev.measurement)
                self._own = vtpm
            rc, params = tpmcmd.parse(self._own.execute(tpmcmd.build(tpmcmd.CommandCode.Vendor_Evidence, bytes(nonce))))
            if rc:
                raise ChannelIntegrityError("rogue vTPM failed")
        q, chain, binds = parse_evidence(params)
        event_log = EventLog(slot.label, os.urandom(16), events)
        return {"quote": q, "ek_chain": chain, "pcr0_prefix": [d for _, d in binds], "event_log": event_log}
