"""Root-of-trust manager: TPM-List, VM-List and both launch protocols.

The manager runs in the user-trusted entity. It builds and measures the
vTPM-host image, is the only custodian of every per-VM secret, and hands
those secrets out only over sealed channels or secret injection.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import threading
from dataclasses import dataclass, field

from .agent import BootEvent, event_aad
from .channel import HandshakeInitiator
from .crypto import (
    Certificate,
    CertificateAuthority,
    Digest,
    KeyPair,
    KeyPairRole,
    KeyRole,
    SymmetricKey,
    aead_open,
    aead_seal,
    agree,
    hash,
    hmac,
    issue_certificate,
    verify_chain,
)
from .encoding import as_int, as_str, decode, encode, encode_list
from .errors import (
    AuthenticationError,
    BootMeasurementMismatch,
    CertificateChainError,
    ChannelAuthenticationFailed,
    InitMeasurementMismatch,
    InvalidState,
    LaunchAborted,
    ManagerStartupError,
    PlatformUntrusted,
    RegistrationError,
    TransportError,
    TrustChainError,
    error_from_code,
)
from .image import BootStage, CvmImage, StageContent, build_payload, golden_events, measure_image_init
from .node import secret_info, verify_launch_report
from .tpmcvm import image_aad
from .transport import Frame, FrameType, Network
from .vtpm import PcrBank, unseal_state

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"TRMS"
SNAPSHOT_VERSION = 1


class EntryState(enum.Enum):
    pending = "pending"
    booted = "booted-verified"
    failed = "failed"


@dataclass
class BootMeasurements:
    final: Digest
    events: list

    def replay(self, init_measurement):
        bank = PcrBank().extend(0, init_measurement)
        for ev in self.events:
            bank = bank.extend(ev.stage.pcr, ev.measurement)
        return bank.composite()


@dataclass
class TpmListEntry:
    tpmcvm_id: str
    root_key_pair: KeyPair = field(repr=False)
    rk_certificate: Certificate = field(repr=False)
    image_key: SymmetricKey | None = field(default=None, repr=False)
    measure_key: SymmetricKey | None = field(default=None, repr=False)
    tls_key_pair: KeyPair | None = field(default=None, repr=False)
    tls_certificate: Certificate | None = field(default=None, repr=False)
    initialization_measurement: Digest | None = None
    boot_measurements: BootMeasurements | None = None
    acvm_pointers: list = field(default_factory=list)
    state: EntryState = EntryState.pending
    handle: str | None = None
    mvtpm_endpoint: str | None = None
    vtpm_endpoint: str | None = None


@dataclass
class VmListEntry:
    acvm_id: str
    user_identifier: str
    amd_key: KeyPair = field(repr=False)
    vm_key: SymmetricKey = field(repr=False)
    acvm_image: CvmImage = field(repr=False)
    tpm_state_sealed: bytes = field(default=b"", repr=False)
    expected_counter: int = 0
    golden_init_measurement: Digest | None = None
    golden_boot_events: list = field(default_factory=list)
    status: str = "registered"
    handle: str | None = None
    tpmcvm_id: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


@dataclass
class _Stream:
    space: PcrBank
    events: list = field(default_factory=list)
    next_seq: int = 1
    done: bool = False
    error: Exception | None = None


@dataclass
class _LaunchContext:
    acvm_id: str
    tpmcvm_id: str
    cloud: object
    handle: str
    measurement: Digest
    platform: object
    session_key: SymmetricKey | None = field(default=None, repr=False)


@dataclass(frozen=True)
class Disclosure:
    """What the user's verifier receives from the manager over the trusted path."""

    acvm_id: str
    vm_key: SymmetricKey = field(repr=False)
    binding_inputs: bytes
    golden_init: Digest
    golden_events: tuple
    expected_counter: int
    trusted_root: Certificate


def _filler(label, n=512):
    out = b""
    block = label.encode()
    while len(out) < n:
        block = hash(block)
        out += block
    return label.encode() + b"\0" + out[:n]


class Manager:
    def __init__(self, identity, ca: CertificateAuthority, trk_cert, mrk, mrk_cert, network, amd_root, audit_path=None):
        self.identity = identity
        self.ca = ca
        self.trk_cert = trk_cert
        self._mrk = mrk
        self.mrk_cert = mrk_cert
        self.network = network
        self.amd_root = amd_root
        self.tpm_list = {}
        self.vm_list = {}
        self.audit_log = []
        self._audit_path = audit_path
        self._streams = {}
        self._launching = {}
        self._channels = {}
        self._links = {}
        self._lock = threading.Lock()
        self._tids = itertools.count(1)
        self._aids = itertools.count(1)
        self.launch_endpoint = f"{identity}/launch-control"
        self.mgmt_endpoint = f"{identity}/vtpm-management"
        network.serve(self.launch_endpoint, self._on_launch_control)
        network.serve(self.mgmt_endpoint, self._on_management)
        self._closed = False

    @property
    def chain(self):
        return [self.ca.root, self.trk_cert, self.mrk_cert]

    def close(self):
        if self._closed:
            return
        self._closed = True
        self.network.unserve(self.launch_endpoint)
        self.network.unserve(self.mgmt_endpoint)
        self.ca.release_manager(self.identity)

    def _audit(self, step, entry_id, outcome, error_code=None):
        rec = {"step": step, "entry_id": entry_id, "outcome": outcome, "error_code": error_code}
        self.audit_log.append(rec)
        if self._audit_path:
            with open(self._audit_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    # registration

    def register_acvm(self, user, image, acvm_id=None):
        if isinstance(image, (bytes, bytearray)):
            image = CvmImage.from_bytes(image)
        if not image.uefi_region and not image.payload_region:
            raise RegistrationError("empty image")
        with self._lock:
            acvm_id = acvm_id or f"acvm-{next(self._aids)}"
            if acvm_id in self.vm_list:
                raise RegistrationError(f"{acvm_id} already registered")
            entry = VmListEntry(
                acvm_id=acvm_id,
                user_identifier=user,
                amd_key=KeyPair.generate(KeyPairRole.Godh),
                vm_key=SymmetricKey.generate(KeyRole.VmKey),
                acvm_image=image.copy(),
                golden_init_measurement=measure_image_init(image),
                golden_boot_events=golden_events(image),
            )
            self.vm_list[acvm_id] = entry
        self._audit("register", acvm_id, "ok")
        return acvm_id

    # vTPM-host launch

    def _build_tpmcvm_image(self, tid, image_key, tls, tls_cert):
        uefi = _filler(f"OVMF-TPMCVM/{tid}", 1024)
        stages = [
            StageContent(BootStage.Bootloader, "grub-decrypt", _filler("grub-decrypt")),
            StageContent(BootStage.Kernel, "vmlinuz-minimal", _filler("vmlinuz-minimal", 2048)),
            StageContent(BootStage.Application, "cn-mvtpm", _filler("cn-mvtpm", 1024)),
        ]
        extras = {
            "tls_private": tls.private_bytes(),
            "tls_cert": tls_cert.to_bytes(),
            "ca_root": self.ca.root.to_bytes(),
            "manager": self.identity.encode(),
            "launch_endpoint": self.launch_endpoint.encode(),
            "mgmt_endpoint": self.mgmt_endpoint.encode(),
        }
        payload = aead_seal(image_key, build_payload(stages, extras), image_aad(tid))
        image = CvmImage(uefi, payload, {"name": tid, "version": "1", "kind": "tpmcvm", "encrypted": True})
        return image, measure_image_init(image), [s.measurement for s in stages]

    def _inject(self, cloud, handle, measurement, platform, secrets, owner_key=None):
        owner = owner_key or KeyPair.generate(KeyPairRole.Godh)
        key = agree(owner, platform.dh_public, secret_info(handle, measurement))
        sealed = aead_seal(key, secrets, encode(handle, measurement))
        cloud.inject_secret(handle, sealed, owner.public)

    def _check_platform(self, cloud, step):
        platform = cloud.platform_identity()
        try:
            verify_chain(platform.chain, self.amd_root)
        except CertificateChainError as exc:
            raise PlatformUntrusted(str(exc), step=step) from None
        return platform

    def _check_report(self, report, handle, platform, golden, step):
        if report.handle != handle or not verify_launch_report(report, platform):
            raise InitMeasurementMismatch("launch report not signed by the platform", step=step)
        if report.measurement != golden:
            raise InitMeasurementMismatch(
                f"measured {report.measurement.hex()[:16]}, expected {golden.hex()[:16]}", step=step
            )
        return report.measurement

    def launch_tpmcvm(self, cloud) -> str:
        tid = f"tpmcvm-{next(self._tids)}"
        rk = KeyPair.generate(KeyPairRole.TpmcvmRoot)
        rk_cert = issue_certificate(self._mrk, self.identity, f"rk:{tid}", rk.public)
        entry = TpmListEntry(tid, rk, rk_cert)
        with self._lock:
            self.tpm_list[tid] = entry
        self._audit(1, tid, "ok")
        step = 2
        try:
            platform = self._check_platform(cloud, 2)
            self._audit(2, tid, "ok")
            step = 3
            entry.tls_key_pair = KeyPair.generate(KeyPairRole.Tls)
            entry.tls_certificate = self.ca.issue(f"tls:{tid}", entry.tls_key_pair.public)
            entry.measure_key = SymmetricKey.generate(KeyRole.MeasureKey)
            self._audit(3, tid, "ok")
            step = 4
            entry.image_key = SymmetricKey.generate(KeyRole.ImageKey)
            image, golden_init, golden = self._build_tpmcvm_image(
                tid, entry.image_key, entry.tls_key_pair, entry.tls_certificate
            )
            entry.handle, report = cloud.launch_cvm(image, label=tid)
            self._audit(4, tid, "ok")
            step = 5
            entry.initialization_measurement = self._check_report(report, entry.handle, platform, golden_init, 5)
            self._audit(5, tid, "ok")
            step = 6
            self._inject(
                cloud, entry.handle, report.measurement, platform,
                encode(tid, entry.image_key.material, entry.measure_key.material),
            )
            self._audit(6, tid, "ok")
            step = 7
            with self._lock:
                self._streams[tid] = _Stream(PcrBank().extend(0, entry.initialization_measurement))
            cloud.start(entry.handle)
            with self._lock:
                stream = self._streams.pop(tid)
            if stream.error is not None:
                raise stream.error
            if not stream.done:
                raise LaunchAborted("boot measurement stream did not complete", step=7)
            self._audit(7, tid, "ok")
            step = 8
            measured = [ev.measurement for ev in stream.events]
            if measured != golden:
                raise BootMeasurementMismatch(
                    f"{len(measured)} boot events do not match the {len(golden)} expected", step=8
                )
            entry.boot_measurements = BootMeasurements(stream.space.composite(), stream.events)
            self._audit(8, tid, "ok")
            step = 9
            entry.mvtpm_endpoint, entry.vtpm_endpoint = cloud.guest_endpoints(entry.handle)
            self._handshake(entry, cloud)
            self._audit(9, tid, "ok")
            step = 10
            parent = encode_list([c.to_bytes() for c in [*self.chain, rk_cert]])
            self._call(tid, "deploy-root", encode(rk.private_bytes(), rk_cert.to_bytes(), parent), step=10)
            entry.state = EntryState.booted
            self._audit(10, tid, "ok")
        except TrustChainError as exc:
            self._fail_tpmcvm(entry, cloud, exc, step)
            raise
        except Exception as exc:
            self._fail_tpmcvm(entry, cloud, exc, step)
            raise LaunchAborted(f"step {step}: {exc}", step=step) from exc
        return tid

    def _fail_tpmcvm(self, entry, cloud, exc, step):
        with self._lock:
            self._streams.pop(entry.tpmcvm_id, None)
        entry.state = EntryState.failed
        if getattr(exc, "step", None) is None and isinstance(exc, TrustChainError):
            exc.step = step
        self._audit(step, entry.tpmcvm_id, "failed", getattr(exc, "code", "LaunchAborted"))
        self._drop_channel(entry.tpmcvm_id)
        if entry.handle:
            cloud.destroy(entry.handle)

    def _handshake(self, entry, cloud):
        tid = entry.tpmcvm_id
        link = cloud.link("mvtpm", entry.mvtpm_endpoint)
        hs = HandshakeInitiator(tid, self.identity, self._mrk, self.chain, entry.tls_key_pair.public)
        resp = link.request(FrameType.HANDSHAKE_INIT, hs.start())
        if resp.type is not FrameType.HANDSHAKE_RESP:
            raise ChannelAuthenticationFailed("unexpected handshake reply", step=9)
        msg3, channel = hs.finish(resp.payload)
        ack = link.request(FrameType.HANDSHAKE_FINISH, msg3)
        if ack.type is not FrameType.ACK:
            raise ChannelAuthenticationFailed("handshake not acknowledged", step=9)
        with self._lock:
            self._channels[tid] = channel
            self._links[tid] = (cloud, link)

    def _drop_channel(self, tid):
        with self._lock:
            self._channels.pop(tid, None)
            self._links.pop(tid, None)

    def _call(self, tid, kind, body=b"", blob=None, step=None):
        """One sealed request/response with a vTPM host."""
        with self._lock:
            channel = self._channels.get(tid)
            cloud_link = self._links.get(tid)
        if channel is None:
            raise LaunchAborted(f"no secure channel to {tid}", step=step)
        _, link = cloud_link
        record = channel.seal(kind, body)
        try:
            if blob is None:
                reply = link.request(FrameType.SECURE, encode(tid, record))
            else:
                reply = link.request(FrameType.SECURE_BLOB, encode(tid, record, blob))
            if reply.type not in (FrameType.SECURE, FrameType.SECURE_BLOB):
                raise ChannelAuthenticationFailed(f"reply of type {reply.type.name}")
            fields = decode(reply.payload)
            out_kind, out_body = channel.open(fields[1])
        except (ChannelAuthenticationFailed, TransportError) as exc:
            self._drop_channel(tid)
            if exc.step is None:
                exc.step = step
            raise
        if out_kind == "error":
            code, msg = decode(out_body, 2)
            raise error_from_code(as_str(code), as_str(msg), step)
        return out_kind, out_body, fields[2] if len(fields) == 3 else None

    def reconnect(self, tpmcvm_id, cloud):
        entry = self.tpm_list[tpmcvm_id]
        if entry.state is not EntryState.booted:
            raise InvalidState(f"{tpmcvm_id} is not booted-verified")
        self._handshake(entry, cloud)

    # measurement stream (launch-control endpoint)

    def _on_launch_control(self, frame: Frame) -> Frame:
        if frame.type not in (FrameType.EVENT, FrameType.EVENT_DONE):
            raise InvalidState(f"unexpected frame {frame.type.name} on launch-control")
        try:
            tid = as_str(decode(frame.payload, 3)[0])
        except ValueError:
            raise ChannelAuthenticationFailed("malformed measurement frame") from None
        self.extend_boot_measurement(tid, frame.payload)
        return Frame(FrameType.ACK, b"")

    def extend_boot_measurement(self, tpmcvm_id, sealed_event):
        with self._lock:
            stream = self._streams.get(tpmcvm_id)
            entry = self.tpm_list.get(tpmcvm_id)
        if stream is None or entry is None or stream.done or stream.error:
            raise InvalidState(f"no boot of {tpmcvm_id} in progress")
        try:
            tid, seq, blob = decode(sealed_event, 3)
            seq = as_int(seq)
        except ValueError:
            raise ChannelAuthenticationFailed("malformed measurement frame", step=8) from None
        if as_str(tid) != tpmcvm_id:
            raise ChannelAuthenticationFailed("measurement for another entry", step=8)
        if seq != stream.next_seq:
            # replayed or reordered frame: refuse it, keep the stream
            raise ChannelAuthenticationFailed(f"measurement sequence {seq}, expected {stream.next_seq}", step=8)
        try:
            plain = aead_open(entry.measure_key, blob, event_aad(tpmcvm_id, seq))
        except AuthenticationError:
            stream.error = ChannelAuthenticationFailed(f"measurement {seq} failed authentication", step=8)
            self._audit(8, tpmcvm_id, "rejected", stream.error.code)
            raise stream.error from None
        fields = decode(plain)
        if len(fields) == 2 and fields[0] == b"done":
            if as_int(fields[1]) != len(stream.events):
                stream.error = BootMeasurementMismatch("event count mismatch at end of boot", step=8)
                raise stream.error
            stream.done = True
        else:
            ev = BootEvent.from_bytes(plain)
            if ev.sequence != seq:
                stream.error = ChannelAuthenticationFailed("event sequence mismatch", step=8)
                raise stream.error
            stream.space = stream.space.extend(ev.stage.pcr, ev.measurement)
            stream.events.append(ev)
        stream.next_seq += 1
        return True

    # management endpoint (requests from vTPM hosts)

    def _on_management(self, frame: Frame) -> Frame:
        if frame.type is not FrameType.SECURE:
            raise ChannelAuthenticationFailed("management requests must be sealed")
        cid, record = decode(frame.payload, 2)
        tid = as_str(cid)
        with self._lock:
            channel = self._channels.get(tid)
        if channel is None:
            raise ChannelAuthenticationFailed(f"no channel for {tid}")
        kind, body = channel.open(record)
        try:
            if kind != "binding-request":
                raise InvalidState(f"unknown request {kind!r}")
            acvm_id = as_str(decode(body, 1)[0])
            with self._lock:
                ctx = self._launching.get(acvm_id)
            if ctx is None or ctx.tpmcvm_id != tid:
                raise InvalidState(f"binding request for {acvm_id} outside its launch")
            reply = channel.seal("binding-proof", self.binding_proof(acvm_id, tid))
            self._audit(8, acvm_id, "ok")
        except TrustChainError as exc:
            self._audit(8, tid, "refused", exc.code)
            reply = channel.seal("error", encode(exc.code, str(exc)))
        return Frame(FrameType.SECURE, encode(tid, reply))

    def binding_inputs(self, tpmcvm_id) -> bytes:
        entry = self.tpm_list[tpmcvm_id]
        if entry.boot_measurements is None:
            raise InvalidState(f"{tpmcvm_id} has no boot measurements")
        return encode(b"tpmcvm-boot", entry.boot_measurements.final, entry.initialization_measurement)

    def binding_proof(self, acvm_id, tpmcvm_id) -> Digest:
        return hmac(self.vm_list[acvm_id].vm_key, self.binding_inputs(tpmcvm_id))

    # application VM launch

    def launch_acvm(self, acvm_id, cloud, tpmcvm_id):
        vm = self.vm_list.get(acvm_id)
        tpm = self.tpm_list.get(tpmcvm_id)
        if vm is None:
            raise InvalidState(f"{acvm_id} is not registered")
        if tpm is None or tpm.state is not EntryState.booted:
            raise InvalidState(f"{tpmcvm_id} is not booted-verified")
        with vm.lock:
            if vm.status == "running":
                raise InvalidState(f"{acvm_id} is already running")
            self._audit(1, acvm_id, "ok")
            step, handle, bound = 2, None, False
            try:
                handle, report = cloud.launch_cvm(vm.acvm_image, label=acvm_id)
                self._audit(2, acvm_id, "ok")
                step = 3
                platform = self._check_platform(cloud, 3)
                measurement = self._check_report(report, handle, platform, vm.golden_init_measurement, 3)
                self._audit(3, acvm_id, "ok")
                cloud.bind_vtpm(handle, tpm.vtpm_endpoint)
                with self._lock:
                    self._launching[acvm_id] = _LaunchContext(acvm_id, tpmcvm_id, cloud, handle, measurement, platform)
                step = 4
                if tpmcvm_id not in self._channels:
                    self.reconnect(tpmcvm_id, cloud)
                has_state = bool(vm.tpm_state_sealed)
                self._call(
                    tpmcvm_id, "prepare",
                    encode(acvm_id, vm.vm_key.material, vm.expected_counter, int(has_state)),
                    blob=vm.tpm_state_sealed, step=4,
                )
                self._audit(4, acvm_id, "ok")
                step = 5
                self.provision_session_key(acvm_id)
                bound = True
                self._audit(5, acvm_id, "ok")
                step = 6
                status = cloud.start(handle)
                self._audit(6, acvm_id, "ok" if status == "running" else status)
                vm.status, vm.handle, vm.tpmcvm_id = "running", handle, tpmcvm_id
                if acvm_id not in tpm.acvm_pointers:
                    tpm.acvm_pointers.append(acvm_id)
            except TrustChainError as exc:
                self._fail_acvm(vm, cloud, handle, tpmcvm_id, bound, exc, step)
                raise
            except Exception as exc:
                self._fail_acvm(vm, cloud, handle, tpmcvm_id, bound, exc, step)
                raise LaunchAborted(f"step {step}: {exc}", step=step) from exc
            finally:
                with self._lock:
                    self._launching.pop(acvm_id, None)
        return handle

    def _fail_acvm(self, vm, cloud, handle, tpmcvm_id, bound, exc, step):
        if isinstance(exc, TrustChainError) and exc.step is None:
            exc.step = step
        self._audit(step, vm.acvm_id, "failed", getattr(exc, "code", "LaunchAborted"))
        if tpmcvm_id in self._channels:
            try:
                self._call(tpmcvm_id, "discard", encode(vm.acvm_id))
            except TrustChainError:
                pass
        if handle:
            cloud.destroy(handle)
        vm.status = "stopped" if vm.tpm_state_sealed else "registered"

    def provision_session_key(self, acvm_id) -> SymmetricKey:
        """Fresh session key to the vTPM host (sealed channel) and the ACVM (injection).

        Delivery to the host completes the bind there: state unseal, binding
        proof request and both PCR0 extends happen before it answers.
        """
        with self._lock:
            ctx = self._launching.get(acvm_id)
        if ctx is None:
            raise InvalidState(f"no launch of {acvm_id} in progress")
        vm = self.vm_list[acvm_id]
        key = SymmetricKey.generate(KeyRole.SessionKey)
        ctx.session_key = key
        kind, body, _ = self._call(
            ctx.tpmcvm_id, "session", encode(acvm_id, key.material, ctx.measurement), step=5
        )
        if kind != "bound":
            raise LaunchAborted(f"unexpected reply {kind!r} to session delivery", step=5)
        _, counter = decode(body, 2)
        if as_int(counter) != vm.expected_counter:
            raise LaunchAborted("vTPM counter disagrees with the VM-List", step=7)
        self._inject(ctx.cloud, ctx.handle, ctx.measurement, ctx.platform, encode(acvm_id, key.material), vm.amd_key)
        return key

    def teardown_acvm(self, acvm_id, cloud):
        vm = self.vm_list[acvm_id]
        with vm.lock:
            if vm.status != "running":
                raise InvalidState(f"{acvm_id} is not running")
            cloud.stop_cvm(vm.handle)
            _, _, blob = self._call(vm.tpmcvm_id, "teardown", encode(acvm_id), step="teardown")
            new_counter = vm.expected_counter + 1
            unseal_state(blob, vm.vm_key, acvm_id, new_counter)
            vm.tpm_state_sealed = blob
            vm.expected_counter = new_counter
            cloud.destroy(vm.handle)
            vm.status, vm.handle = "stopped", None
        self._audit("teardown", acvm_id, "ok")
        return new_counter

    def disclosure(self, acvm_id) -> Disclosure:
        vm = self.vm_list[acvm_id]
        if vm.tpmcvm_id is None:
            raise InvalidState(f"{acvm_id} was never bound")
        return Disclosure(
            acvm_id,
            vm.vm_key,
            self.binding_inputs(vm.tpmcvm_id),
            vm.golden_init_measurement,
            tuple(vm.golden_boot_events),
            vm.expected_counter,
            self.ca.root,
        )

    def custodial_keys(self):
        """All ImageKey/MeasureKey/VmKey material held by the manager."""
        keys = []
        for e in self.tpm_list.values():
            keys += [k for k in (e.image_key, e.measure_key) if k is not None]
        keys += [v.vm_key for v in self.vm_list.values()]
        return keys

    # snapshot

    def save_snapshot(self, path, storage_key: SymmetricKey):
        doc = {
            "identity": self.identity,
            "mrk": self._mrk.private_bytes().hex(),
            "mrk_cert": self.mrk_cert.to_dict(),
            "trk_cert": self.trk_cert.to_dict(),
            "tpm_list": [_tpm_entry_to_dict(e) for e in self.tpm_list.values()],
            "vm_list": [_vm_entry_to_dict(v) for v in self.vm_list.values()],
        }
        aad = SNAPSHOT_MAGIC + bytes([SNAPSHOT_VERSION])
        blob = aead_seal(storage_key, json.dumps(doc).encode(), aad)
        with open(path, "wb") as fh:
            fh.write(aad + blob)

    @classmethod
    def load_snapshot(cls, path, storage_key, ca, network, amd_root, audit_path=None):
        with open(path, "rb") as fh:
            raw = fh.read()
        aad = SNAPSHOT_MAGIC + bytes([SNAPSHOT_VERSION])
        if raw[:5] != aad:
            raise ManagerStartupError("not a manager snapshot")
        try:
            doc = json.loads(aead_open(storage_key, raw[5:], aad))
        except AuthenticationError:
            raise ManagerStartupError("snapshot does not open under this storage key") from None
        identity = doc["identity"]
        if not ca.enroll_manager(identity):
            raise ManagerStartupError(f"manager {identity!r} already running")
        mgr = cls(
            identity, ca, Certificate.from_dict(doc["trk_cert"]),
            KeyPair.from_private_bytes(bytes.fromhex(doc["mrk"]), KeyPairRole.ManagerRoot),
            Certificate.from_dict(doc["mrk_cert"]), network, amd_root, audit_path,
        )
        for d in doc["tpm_list"]:
            e = _tpm_entry_from_dict(d)
            if e.state is EntryState.pending:
                # in-flight launches do not survive a restart
                e.state = EntryState.failed
            mgr.tpm_list[e.tpmcvm_id] = e
        for d in doc["vm_list"]:
            v = _vm_entry_from_dict(d)
            mgr.vm_list[v.acvm_id] = v
        mgr._tids = itertools.count(len(mgr.tpm_list) + 1)
        mgr._aids = itertools.count(len(mgr.vm_list) + 1)
        return mgr


def init_manager(user_node_root: KeyPair, ca: CertificateAuthority, *, identity="tr-manager",
                 user_node_cert=None, network=None, amd_root=None, audit_path=None) -> Manager:
    """Create the manager root key, have the user node certify it, open endpoints."""
    try:
        if not ca.enroll_manager(identity):
            raise ManagerStartupError(f"manager {identity!r} already running")
        trk_cert = user_node_cert or ca.issue("user-node", user_node_root.public)
    except ConnectionError as exc:
        raise ManagerStartupError(str(exc)) from None
    mrk = KeyPair.generate(KeyPairRole.ManagerRoot)
    mrk_cert = issue_certificate(user_node_root, trk_cert.subject, identity, mrk.public)
    try:
        return Manager(identity, ca, trk_cert, mrk, mrk_cert, network or Network(), amd_root, audit_path)
    except TransportError as exc:
        ca.release_manager(identity)
        raise ManagerStartupError(str(exc)) from None


def _hex(x):
    return None if x is None else bytes(x).hex()


def _tpm_entry_to_dict(e: TpmListEntry):
    return {
        "tpmcvm_id": e.tpmcvm_id,
        "root_key_pair": e.root_key_pair.private_bytes().hex(),
        "rk_certificate": e.rk_certificate.to_dict(),
        "image_key": _hex(e.image_key and e.image_key.material),
        "measure_key": _hex(e.measure_key and e.measure_key.material),
        "tls_key_pair": _hex(e.tls_key_pair and e.tls_key_pair.private_bytes()),
        "tls_certificate": e.tls_certificate and e.tls_certificate.to_dict(),
        "initialization_measurement": _hex(e.initialization_measurement),
        "boot_final": _hex(e.boot_measurements and e.boot_measurements.final),
        "boot_events": [ev.to_dict() for ev in (e.boot_measurements.events if e.boot_measurements else [])],
        "acvm_pointers": list(e.acvm_pointers),
        "state": e.state.value,
        "handle": e.handle,
        "mvtpm_endpoint": e.mvtpm_endpoint,
        "vtpm_endpoint": e.vtpm_endpoint,
    }


def _tpm_entry_from_dict(d):
    def sym(h, role):
        return None if h is None else SymmetricKey(bytes.fromhex(h), role)

    e = TpmListEntry(
        d["tpmcvm_id"],
        KeyPair.from_private_bytes(bytes.fromhex(d["root_key_pair"]), KeyPairRole.TpmcvmRoot),
        Certificate.from_dict(d["rk_certificate"]),
        sym(d["image_key"], KeyRole.ImageKey),
        sym(d["measure_key"], KeyRole.MeasureKey),
    )
    if d["tls_key_pair"]:
        e.tls_key_pair = KeyPair.from_private_bytes(bytes.fromhex(d["tls_key_pair"]), KeyPairRole.Tls)
        e.tls_certificate = Certificate.from_dict(d["tls_certificate"])
    if d["initialization_measurement"]:
        e.initialization_measurement = Digest.fromhex(d["initialization_measurement"])
    if d["boot_final"]:
        e.boot_measurements = BootMeasurements(
            Digest.fromhex(d["boot_final"]), [BootEvent.from_dict(x) for x in d["boot_events"]]
        )
    e.acvm_pointers = list(d["acvm_pointers"])
    e.state = EntryState(d["state"])
    e.handle, e.mvtpm_endpoint, e.vtpm_endpoint = d["handle"], d["mvtpm_endpoint"], d["vtpm_endpoint"]
    return e


def _vm_entry_to_dict(v: VmListEntry):
    return {
        "acvm_id": v.acvm_id,
        "user_identifier": v.user_identifier,
        "amd_key": v.amd_key.private_bytes().hex(),
        "vm_key": v.vm_key.material.hex(),
        "acvm_image": v.acvm_image.to_bytes().hex(),
        "tpm_state_sealed": v.tpm_state_sealed.hex(),
        "expected_counter": v.expected_counter,
        "status": v.status,
        "tpmcvm_id": v.tpmcvm_id,
    }


def _vm_entry_from_dict(d):
    image = CvmImage.from_bytes(bytes.fromhex(d["acvm_image"]))
    return VmListEntry(
        acvm_id=d["acvm_id"],
        user_identifier=d["user_identifier"],
        amd_key=KeyPair.from_private_bytes(bytes.fromhex(d["amd_key"]), KeyPairRole.Godh),
        vm_key=SymmetricKey(bytes.fromhex(d["vm_key"]), KeyRole.VmKey),
        acvm_image=image,
        tpm_state_sealed=bytes.fromhex(d["tpm_state_sealed"]),
        expected_counter=d["expected_counter"],
        golden_init_measurement=measure_image_init(image),
        golden_boot_events=golden_events(image),
        # running guests lost their manager-side session with the restart
        status="stopped" if d["status"] == "running" else d["status"],
        tpmcvm_id=d["tpmcvm_id"],
    )
