import hashlib

import pytest

from cvmtrust.crypto import CertificateAuthority, KeyPair, KeyPairRole, KeyRole, SymmetricKey, aead_seal, verify_chain
from cvmtrust.agent import event_aad
from cvmtrust.encoding import encode
from cvmtrust.errors import (
    ChannelAuthenticationFailed,
    InvalidState,
    ManagerStartupError,
    PlatformUntrusted,
    RegistrationError,
)
from cvmtrust.image import CvmImage, random_image
from cvmtrust.manager import EntryState, Manager, init_manager
from cvmtrust.node import CloudNode, SecureProcessor
from cvmtrust.transport import Network
from cvmtrust.vtpm import unseal_state


def test_init_chain_verifies():
    ca, net = CertificateAuthority(), Network()
    mgr = init_manager(KeyPair.generate(KeyPairRole.UserNodeRoot), ca, network=net)
    assert verify_chain(mgr.chain, ca.root).subject == mgr.identity
    mgr.close()


def test_init_refuses_duplicate_and_unreachable_ca():
    ca, net = CertificateAuthority(), Network()
    mgr = init_manager(KeyPair.generate(KeyPairRole.UserNodeRoot), ca, network=net)
    with pytest.raises(ManagerStartupError):
        init_manager(KeyPair.generate(KeyPairRole.UserNodeRoot), ca, network=Network())
    mgr.close()
    ca.reachable = False
    with pytest.raises(ManagerStartupError):
        init_manager(KeyPair.generate(KeyPairRole.UserNodeRoot), ca, network=Network())


def test_register_refusals(deployment, image):
    mgr = deployment.manager
    mgr.register_acvm("u", image, "A")
    with pytest.raises(RegistrationError):
        mgr.register_acvm("u", image, "A")
    with pytest.raises(RegistrationError):
        mgr.register_acvm("u", CvmImage(b"", b"", {"kind": "acvm"}))
    entry = mgr.vm_list["A"]
    assert entry.expected_counter == 0 and entry.tpm_state_sealed == b""
    assert entry.golden_init_measurement == hashlib.sha256(image.uefi_region).digest()


def test_vm_keys_distinct(deployment):
    mgr = deployment.manager
    for i in range(5):
        mgr.register_acvm("u", random_image(i), f"v{i}")
    keys = [e.vm_key.material for e in mgr.vm_list.values()]
    assert len(set(keys)) == len(keys)


def test_tpmcvm_entry_after_launch(deployment):
    e = deployment.manager.tpm_list[deployment.tpmcvm_id]
    assert e.state is EntryState.booted
    assert len(e.boot_measurements.events) == 3
    # final digest is the fold of init and every event over the PCRs-like space
    assert e.boot_measurements.final == e.boot_measurements.replay(e.initialization_measurement)


def test_binding_proof_oracle(deployment, image):
    mgr = deployment.manager
    mgr.register_acvm("u", image, "A")
    key = mgr.vm_list["A"].vm_key.material
    inputs = mgr.binding_inputs(deployment.tpmcvm_id)
    import hmac as std_hmac
    assert mgr.binding_proof("A", deployment.tpmcvm_id) == std_hmac.new(key, inputs, hashlib.sha256).digest()


def test_untrusted_platform_refused():
    ca, net = CertificateAuthority(), Network()
    node = CloudNode(net)
    mgr = init_manager(KeyPair.generate(KeyPairRole.UserNodeRoot), ca, network=net, amd_root=SecureProcessor().root)
    with pytest.raises(PlatformUntrusted):
        mgr.launch_tpmcvm(node)
    assert list(mgr.tpm_list.values())[0].state is EntryState.failed
    assert mgr.audit_log[-1]["error_code"] == "PlatformUntrusted"
    mgr.close()


def test_measurement_stream_rejects_outside_launch(deployment):
    mgr, tid = deployment.manager, deployment.tpmcvm_id
    key = mgr.tpm_list[tid].measure_key
    forged = encode(tid, 1, aead_seal(key, b"x", event_aad(tid, 1)))
    with pytest.raises(InvalidState):
        mgr.extend_boot_measurement(tid, forged)


def test_launch_acvm_requires_booted_host(deployment, image):
    deployment.register("A", image)
    with pytest.raises(InvalidState):
        deployment.manager.launch_acvm("A", deployment.node, "tpmcvm-99")


def test_teardown_counter_and_seal_binding(deployment, image):
    dep = deployment
    dep.register("A", image)
    dep.launch("A")
    with pytest.raises(InvalidState):
        dep.launch("A")
    assert dep.teardown("A") == 1
    entry = dep.manager.vm_list["A"]
    state = unseal_state(entry.tpm_state_sealed, entry.vm_key, "A", 1)
    assert state.counter.value == 1
    with pytest.raises(InvalidState):
        dep.teardown("A")


def test_returning_acvm_keeps_objects(deployment, image):
    from cvmtrust.tpmcmd import CommandCode
    dep = deployment
    dep.register("A", image)
    dep.launch("A")
    agent = dep.node.guest(dep.handles["A"]).agent
    _, (handle, pub) = agent.command(CommandCode.Create)
    dep.teardown("A")
    dep.launch("A")
    agent = dep.node.guest(dep.handles["A"]).agent
    rc, (sig,) = agent.command(CommandCode.Sign, handle, b"\1" * 32)
    assert rc == 0
    verdict, *_ = dep.attest("A")
    assert verdict.accepted


def test_audit_log_lines(deployment, tmp_path):
    for rec in deployment.manager.audit_log:
        assert set(rec) == {"step", "entry_id", "outcome", "error_code"}
    assert [r["step"] for r in deployment.manager.audit_log][:10] == list(range(1, 11))


def test_snapshot_roundtrip(deployment, image, tmp_path):
    dep = deployment
    dep.register("A", image)
    dep.cycle("A")
    key = SymmetricKey.generate(KeyRole.StorageKey)
    path = tmp_path / "mgr.snap"
    dep.manager.save_snapshot(path, key)
    assert image.uefi_region not in path.read_bytes()
    dep.manager.close()
    with pytest.raises(ManagerStartupError):
        Manager.load_snapshot(path, SymmetricKey.generate(KeyRole.StorageKey), dep.ca, Network(), dep.node.sp.root)
    restored = Manager.load_snapshot(path, key, dep.ca, dep.network, dep.node.sp.root)
    dep.manager = restored
    a = restored.vm_list["A"]
    assert a.expected_counter == 1 and a.vm_key.material
    assert restored.tpm_list[dep.tpmcvm_id].state is EntryState.booted
    # the restored manager can drive the same host after a fresh handshake
    restored.reconnect(dep.tpmcvm_id, dep.node)
    dep.launch("A")
    verdict, *_ = dep.attest("A")
    assert verdict.accepted


def _open_stream(mgr, tid):
    from cvmtrust.manager import _Stream
    from cvmtrust.vtpm import PcrBank
    mgr._streams[tid] = _Stream(PcrBank())
    return mgr._streams[tid]


def _event(key, tid, seq, stage_content=b"k"):
    from cvmtrust.agent import BootEvent
    from cvmtrust.crypto import hash
    from cvmtrust.image import BootStage
    ev = BootEvent(seq, BootStage.Kernel, "k", hash(stage_content))
    return encode(tid, seq, aead_seal(key, ev.to_bytes(), event_aad(tid, seq)))


def test_stream_out_of_order_refused_without_abort(deployment):
    mgr, tid = deployment.manager, deployment.tpmcvm_id
    key = mgr.tpm_list[tid].measure_key
    stream = _open_stream(mgr, tid)
    with pytest.raises(ChannelAuthenticationFailed):
        mgr.extend_boot_measurement(tid, _event(key, tid, 2))
    assert stream.error is None
    assert mgr.extend_boot_measurement(tid, _event(key, tid, 1))
    with pytest.raises(ChannelAuthenticationFailed):
        mgr.extend_boot_measurement(tid, _event(key, tid, 1))
    assert len(stream.events) == 1


def test_stream_foreign_key_aborts(deployment):
    mgr, tid = deployment.manager, deployment.tpmcvm_id
    stream = _open_stream(mgr, tid)
    with pytest.raises(ChannelAuthenticationFailed):
        mgr.extend_boot_measurement(tid, _event(SymmetricKey.generate(KeyRole.MeasureKey), tid, 1))
    assert stream.error is not None
    with pytest.raises(InvalidState):
        mgr.extend_boot_measurement(tid, _event(mgr.tpm_list[tid].measure_key, tid, 1))
