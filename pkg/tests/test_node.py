import pytest

from cvmtrust.crypto import verify_chain
from cvmtrust.errors import InvalidState
from cvmtrust.node import AdversaryConfig, Attack, AttackKind, CloudNode
from cvmtrust.transport import Network


def test_adversary_parsing():
    cfg = AdversaryConfig.parse(["SwapStateFile:B", {"kind": "TamperChannel"}])
    assert cfg.get(AttackKind.SwapStateFile).target == "B"
    assert cfg.get(AttackKind.TamperChannel).target == "measurement"
    assert not AdversaryConfig.parse("None")
    with pytest.raises(ValueError):
        Attack.parse("Teleport")


def test_platform_chain_verifies():
    node = CloudNode(Network())
    ident = node.platform_identity()
    assert verify_chain(ident.chain, node.sp.root)


def test_adversary_fixed_once_started(deployment):
    with pytest.raises(InvalidState):
        deployment.node.apply_adversary(["TamperImage"])


def test_injection_after_boot_refused(deployment, image):
    dep = deployment
    dep.register("A", image)
    handle = dep.launch("A")
    with pytest.raises(InvalidState):
        dep.node.inject_secret(handle, b"\0" * 60, b"\0" * 32)


def test_tpmcvm_receives_injected_keys(deployment):
    dep = deployment
    entry = dep.manager.tpm_list[dep.tpmcvm_id]
    host = dep.node.guest(entry.handle)
    tid, image_key, measure_key = host._secrets
    assert tid == dep.tpmcvm_id
    assert image_key == entry.image_key and measure_key == entry.measure_key


def test_node_trace_has_no_key_material(deployment, image):
    dep = deployment
    dep.register("A", image)
    dep.cycle("A")
    assert dep.node.scan_for(dep.custodial_keys()) == []
    # the scan itself does find planted material
    dep.node.storage["leak"] = dep.custodial_keys()[0].hex()
    assert dep.node.scan_for(dep.custodial_keys())


def test_trace_records_are_well_formed(deployment):
    for rec in deployment.node.trace:
        assert set(rec) == {"time", "actor", "event", "data_class", "summary"}
        assert rec["data_class"] in ("plaintext", "ciphertext")
