"""The vTPM-host guest: measured self-boot, management channel, one vTPM per ACVM.

The service keeps nothing persistent. Every vTPM state file arrives from
the manager at bind time and goes back to it, sealed, at teardown.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

from .agent import GuestAgent
from .channel import VTPM_TO_GUEST, HandshakeResponder, SessionCipher, unpack_wrapped
from .crypto import (
    Certificate,
    Digest,
    KeyPair,
    KeyPairRole,
    KeyRole,
    SymmetricKey,
    aead_open,
)
from .encoding import as_int, as_str, decode, decode_list, encode
from .errors import (
    AuthenticationError,
    ChannelAuthenticationFailed,
    InvalidState,
    TrustChainError,
    error_from_code,
)
from .image import parse_payload
from .transport import Frame, FrameType
from .vtpm import Vtpm, create_vtpm, seal_state, unseal_state

log = logging.getLogger(__name__)


def image_aad(tpmcvm_id):
    return encode(b"tpmcvm-image", tpmcvm_id)


@dataclass
class BoundVtpm:
    acvm_id: str
    vtpm: Vtpm
    vm_key: SymmetricKey = field(repr=False)
    session: SessionCipher = field(repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock)


class TpmcvmService:
    kind = "tpmcvm"

    def __init__(self, image, env):
        self._image = image
        self._env = env
        self.status = "pre-boot"
        self.alerts = []
        self.tpmcvm_id = None
        self.agent = None
        self.active_vtpms = {}
        self._secrets = None
        self._responder = None
        self._channel = None
        self._root = None
        self._root_cert = None
        self._parent_chain = []
        self._pending = {}
        self._extras = {}
        self._mgmt_link = None
        self._lock = threading.Lock()

    @property
    def mvtpm_endpoint(self):
        return f"{self._env.handle}/mvtpm"

    @property
    def vtpm_endpoint(self):
        return f"{self._env.handle}/vtpm"

    def deliver_secret(self, plaintext):
        if self.status != "pre-boot":
            raise InvalidState("secret injection after boot")
        tid, image_key, measure_key = decode(plaintext, 3)
        self._secrets = (
            as_str(tid),
            SymmetricKey(image_key, KeyRole.ImageKey),
            SymmetricKey(measure_key, KeyRole.MeasureKey),
        )

    def boot(self):
        if self._secrets is None:
            raise InvalidState("image and measure keys not injected")
        tid, image_key, measure_key = self._secrets
        self.boot_tpmcvm(tid, image_key, measure_key)
        return self.status

    def boot_tpmcvm(self, tpmcvm_id, image_key, measure_key):
        self.tpmcvm_id = tpmcvm_id
        self.status = "booting"
        try:
            plain = aead_open(image_key, self._image.payload_region, image_aad(tpmcvm_id))
        except AuthenticationError as exc:
            return self._halt(exc, "image decryption failed")
        stages, extras = parse_payload(plain)
        self._extras = extras
        link = self._env.link("measurement", as_str(extras["launch_endpoint"]))
        self.agent = GuestAgent.for_tpmcvm(tpmcvm_id, measure_key, link)
        try:
            for s in stages:
                self.agent.measure_stage(s.stage, s.content, s.label)
            self.agent.finish()
        except TrustChainError as exc:
            return self._halt(exc, "measurement stream rejected")
        tls_key = KeyPair.from_private_bytes(extras["tls_private"], KeyPairRole.Tls)
        self._responder = HandshakeResponder(
            f"tls:{tpmcvm_id}",
            tls_key,
            Certificate.from_bytes(extras["tls_cert"]),
            Certificate.from_bytes(extras["ca_root"]),
            expected_peer=as_str(extras["manager"]),
        )
        self._env.serve(self.mvtpm_endpoint, self.handle_management)
        self._env.serve(self.vtpm_endpoint, self.handle_tpm_frame)
        self.status = "booted"

    def _halt(self, exc, reason):
        log.warning("tpmcvm %s halted: %s (%s)", self.tpmcvm_id, reason, exc)
        self.alerts.append({"code": getattr(exc, "code", "Error"), "detail": f"{reason}: {exc}"})
        self.status = "halted"

    # management channel

    def handle_management(self, frame: Frame) -> Frame:
        if frame.type is FrameType.HANDSHAKE_INIT:
            return Frame(FrameType.HANDSHAKE_RESP, self._responder.respond(frame.payload))
        if frame.type is FrameType.HANDSHAKE_FINISH:
            self._channel = self._responder.complete(frame.payload)
            # a new manager session also means a new connection back to it
            self._mgmt_link = None
            return Frame(FrameType.ACK, b"")
        if frame.type not in (FrameType.SECURE, FrameType.SECURE_BLOB) or self._channel is None:
            raise ChannelAuthenticationFailed("no secure channel established")
        fields = decode(frame.payload)
        blob = fields[2] if frame.type is FrameType.SECURE_BLOB and len(fields) == 3 else b""
        kind, body = self._channel.open(fields[1])
        try:
            reply = self._dispatch(kind, body, blob)
        except TrustChainError as exc:
            log.info("request %s failed: %s", kind, exc)
            reply = ("error", encode(exc.code, str(exc)), None)
        out_kind, out_body, out_blob = reply
        record = self._channel.seal(out_kind, out_body)
        if out_blob is not None:
            return Frame(FrameType.SECURE_BLOB, encode(self._channel.channel_id, record, out_blob))
        return Frame(FrameType.SECURE, encode(self._channel.channel_id, record))

    def _dispatch(self, kind, body, blob):
        if kind == "deploy-root":
            priv, cert, chain = decode(body, 3)
            self._root = KeyPair.from_private_bytes(priv, KeyPairRole.TpmcvmRoot)
            self._root_cert = Certificate.from_bytes(cert)
            self._parent_chain = [Certificate.from_bytes(c) for c in decode_list(chain)]
            return "ok", b"", None
        if self._root is None:
            raise InvalidState("root key not deployed")
        if kind == "prepare":
            acvm_id, vm_key, counter, has_state = decode(body, 4)
            self._pending[as_str(acvm_id)] = (
                SymmetricKey(vm_key, KeyRole.VmKey),
                as_int(counter),
                blob if as_int(has_state) else None,
            )
            return "ok", b"", None
        if kind == "session":
            acvm, session_key, init = decode(body, 3)
            acvm_id = as_str(acvm)
            if acvm_id not in self._pending:
                raise InvalidState(f"no prepared state for {acvm_id}")
            vm_key, counter, sealed = self._pending.pop(acvm_id)
            bound = self.bind_acvm(
                acvm_id, sealed, vm_key, counter, Digest(init), SymmetricKey(session_key, KeyRole.SessionKey)
            )
            return "bound", encode(bound.vtpm.vtpm_id, bound.vtpm.counter), None
        if kind == "discard":
            acvm_id = as_str(decode(body, 1)[0])
            with self._lock:
                self.active_vtpms.pop(acvm_id, None)
            self._pending.pop(acvm_id, None)
            return "ok", b"", None
        if kind == "teardown":
            acvm_id = as_str(decode(body, 1)[0])
            blob = self.teardown(acvm_id)
            return "state", encode(acvm_id), blob
        raise InvalidState(f"unknown management request {kind!r}")

    def _request_binding_proof(self, acvm_id) -> Digest:
        if self._mgmt_link is None:
            self._mgmt_link = self._env.link("mvtpm", as_str(self._extras["mgmt_endpoint"]))
        record = self._channel.seal("binding-request", encode(acvm_id))
        reply = self._mgmt_link.request(FrameType.SECURE, encode(self._channel.channel_id, record))
        kind, body = self._channel.open(decode(reply.payload)[1])
        if kind == "error":
            code, msg = decode(body, 2)
            raise error_from_code(as_str(code), as_str(msg))
        if kind != "binding-proof":
            raise ChannelAuthenticationFailed(f"unexpected reply {kind!r}")
        return Digest(body)

    # vTPM lifecycle

    def bind_acvm(self, acvm_id, sealed_state, vm_key, expected_counter, init_measurement, session_key):
        if self.status != "booted" or self._root is None:
            raise InvalidState("service not ready for binding")
        if acvm_id in self.active_vtpms:
            raise InvalidState(f"{acvm_id} already bound")
        if sealed_state:
            state = unseal_state(sealed_state, vm_key, acvm_id, expected_counter)
            vtpm = Vtpm(state, [*self._parent_chain, state.ek_certificate])
        else:
            vtpm, _ = create_vtpm(self._root, f"vtpm:{acvm_id}", self._root_cert.subject, self._parent_chain)
        proof = self._request_binding_proof(acvm_id)
        vtpm.host_extend(0, proof)
        vtpm.host_extend(0, init_measurement)
        bound = BoundVtpm(acvm_id, vtpm, vm_key, SessionCipher(session_key, acvm_id, VTPM_TO_GUEST))
        with self._lock:
            self.active_vtpms[acvm_id] = bound
        return bound

    def handle_tpm_frame(self, frame: Frame) -> Frame:
        if frame.type is not FrameType.WRAPPED:
            return Frame(FrameType.DROPPED, b"")
        reply = self.handle_tpm_command(frame.payload)
        if reply is None:
            return Frame(FrameType.DROPPED, b"")
        return Frame(FrameType.WRAPPED, reply)

    def handle_tpm_command(self, wrapped):
        """Open, execute and re-wrap one command; ``None`` means dropped."""
        try:
            acvm_id = unpack_wrapped(wrapped)[0]
        except ChannelAuthenticationFailed as exc:
            self._alert("malformed wrapped frame", exc)
            return None
        bound = self.active_vtpms.get(acvm_id)
        if bound is None:
            self._alert(f"command for unknown ACVM {acvm_id!r}", None)
            return None
        with bound.lock:
            try:
                raw = bound.session.unwrap(wrapped)
            except ChannelAuthenticationFailed as exc:
                self._alert(f"dropped command for {acvm_id}", exc)
                return None
            return bound.session.wrap(bound.vtpm.execute(raw))

    def _alert(self, what, exc):
        log.warning("%s: %s", what, exc)
        self.alerts.append({"code": "ChannelAuthenticationFailed", "detail": f"{what}: {exc}"})

    def teardown(self, acvm_id) -> bytes:
        with self._lock:
            bound = self.active_vtpms.pop(acvm_id, None)
        if bound is None:
            raise InvalidState(f"{acvm_id} is not bound")
        state = bound.vtpm.state
        new_counter = state.counter.increment()
        return seal_state(state, bound.vm_key, acvm_id, new_counter)

    def stop(self):
        self.active_vtpms.clear()
        self.status = "stopped"
