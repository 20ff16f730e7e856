import dataclasses
import os

import pytest

from cvmtrust.agent import EventLog
from cvmtrust.crypto import hash
from cvmtrust.image import BootStage, StageContent, build_payload, CvmImage, random_image
from cvmtrust.verifier import EvidenceBundle, Failure, Golden, replay_log, verify
from cvmtrust.vtpm import PcrBank


def test_replay_empty_is_zero_bank():
    assert replay_log(EventLog("a", b"")) == PcrBank()


def test_replay_order_sensitive():
    from cvmtrust.agent import BootEvent
    a = BootEvent(1, BootStage.Application, "a", hash(b"a"))
    b = BootEvent(2, BootStage.Application, "b", hash(b"b"))
    assert replay_log([a, b]) != replay_log([b, a])


@pytest.fixture
def attested(deployment, image):
    dep = deployment
    dep.register("A", image)
    dep.launch("A")
    nonce = os.urandom(16)
    evidence = dep.node.collect_evidence(dep.handles["A"], nonce)
    d = dep.manager.disclosure("A")
    golden = Golden(d.golden_init, list(d.golden_events), d.expected_counter)
    bundle = EvidenceBundle.from_evidence("A", d.golden_init, evidence, d.binding_inputs)
    return dep, bundle, golden, d, nonce


def check(bundle, golden, d, nonce):
    return verify(bundle, golden, d.vm_key, d.trusted_root, nonce)


def test_clean_bundle_accepted(attested):
    dep, bundle, golden, d, nonce = attested
    v = check(bundle, golden, d, nonce)
    assert v.accepted and v.failure is None
    assert check(bundle, golden, d, nonce) == v


def test_replay_equals_live_bank(attested):
    dep, bundle, *_ = attested
    assert replay_log(bundle.event_log, seed_pcr0=bundle.pcr0_prefix) == dep._live_bank("A")


def test_bundle_json_roundtrip(attested):
    _, bundle, golden, d, nonce = attested
    again = EvidenceBundle.from_json(bundle.to_json())
    assert check(again, golden, d, nonce).accepted
    assert Golden.from_dict(golden.to_dict()) == golden


def test_stale_nonce_rejected(attested):
    _, bundle, golden, d, _ = attested
    assert check(bundle, golden, d, os.urandom(16)).failure is Failure.QuoteInvalid


def test_untrusted_chain(attested):
    _, bundle, golden, d, nonce = attested
    chain = bundle.ek_chain
    bad = dataclasses.replace(bundle, ek_chain=[chain[0], *chain[2:]])
    assert check(bad, golden, d, nonce).failure is Failure.ChainOfCertsInvalid


def test_edited_log_breaks_quote(attested):
    _, bundle, golden, d, nonce = attested
    events = list(bundle.event_log.events)
    events[1] = dataclasses.replace(events[1], measurement=hash(b"other"))
    log = dataclasses.replace(bundle.event_log, events=events)
    v = check(dataclasses.replace(bundle, event_log=log), golden, d, nonce)
    assert v.failure is Failure.QuoteInvalid


def test_wrong_vm_key_is_binding_failure(attested, deployment):
    _, bundle, golden, d, nonce = attested
    deployment.manager.register_acvm("u", random_image(9), "other")
    other = deployment.manager.vm_list["other"].vm_key
    assert verify(bundle, golden, other, d.trusted_root, nonce).failure is Failure.BindingProofInvalid


def test_init_measurement_mismatch(attested):
    _, bundle, golden, d, nonce = attested
    v = check(dataclasses.replace(bundle, init_measurement=hash(b"x")), golden, d, nonce)
    assert v.failure is Failure.InitMeasurementMismatch
    v = check(bundle, dataclasses.replace(golden, init=hash(b"x")), d, nonce)
    assert v.failure is Failure.InitMeasurementMismatch


def test_counter_mismatch_is_rollback_suspected(attested):
    _, bundle, golden, d, nonce = attested
    v = check(bundle, dataclasses.replace(golden, expected_counter=5), d, nonce)
    assert v.failure is Failure.RollbackSuspected


def test_changed_second_stage_is_boot_event_mismatch(deployment):
    """The guest really boots a different kernel than the one registered."""
    dep = deployment
    good = random_image(3, "A")
    stages = good.stages()
    stages[1] = StageContent(stages[1].stage, stages[1].label, stages[1].content + b"-patched")
    bad = CvmImage(good.uefi_region, build_payload(stages), dict(good.metadata))
    dep.register("A", good)
    entry = dep.manager.vm_list["A"]
    entry.acvm_image = bad  # the image the node actually launches
    dep.launch("A")
    verdict, *_ = dep.attest("A")
    assert verdict.failure is Failure.BootEventMismatch and verdict.index == 2
    assert verdict.label == "BootEventMismatch(2)"


def test_malformed_bundle_never_crashes(attested):
    _, bundle, golden, d, nonce = attested
    for bad in (None, dataclasses.replace(bundle, quote=None), dataclasses.replace(bundle, pcr0_prefix=[b"x"]),
                dataclasses.replace(bundle, ek_chain=[object()])):
        v = check(bad, golden, d, nonce)
        assert not v.accepted and v.failure in (Failure.MalformedBundle, Failure.ChainOfCertsInvalid)
    assert verify(bundle, golden, d.vm_key, d.trusted_root, None).failure is Failure.MalformedBundle
