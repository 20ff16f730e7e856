"""Scripted end-to-end scenarios over in-process or loopback TCP wiring."""

from __future__ import annotations

import json
import logging
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import tpmcmd
from .crypto import CertificateAuthority, KeyPair, KeyPairRole, hash
from .errors import ChannelIntegrityError, LaunchAborted, TrustChainError
from .image import CvmImage, build_payload, random_image
from .manager import init_manager
from .node import AdversaryConfig, AttackKind, CloudNode, RogueVtpm
from .tpmcmd import CommandCode
from .transport import Network
from .verifier import EvidenceBundle, Golden, Verdict, verify

log = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).with_name("scenarios")

TOPOLOGIES = {"in-process": "local", "local": "local", "tcp-loopback": "tcp", "tcp": "tcp"}

BENCH_COMMANDS = ("GetRandom", "PCR Read", "PCR Extend", "Hash", "Create", "Sign", "Verify Signature")


@dataclass
class Scenario:
    name: str
    topology: str = "in-process"
    adversary: list = field(default_factory=list)
    images: dict = field(default_factory=lambda: {"A": {"seed": 1}})
    expected: dict = field(default_factory=lambda: {"verdict": "ACCEPTED"})
    launches: int = 1
    requirements: list = field(default_factory=list)
    description: str = ""

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        verdict = self.expected.get("verdict")
        if not isinstance(verdict, str) or not verdict:
            raise ValueError("expected verdict must name ACCEPTED or exactly one failure code")
        if self.launches < 1:
            raise ValueError("a scenario needs at least one launch")
        self.adversary_config = AdversaryConfig.parse(self.adversary)

    @classmethod
    def from_dict(cls, d):
        fields = {k: d[k] for k in
                  ("name", "topology", "adversary", "images", "expected", "launches", "requirements", "description")
                  if k in d}
        return cls(**fields)

    @classmethod
    def load(cls, ref):
        """Load from a path or from a bundled scenario name."""
        path = Path(ref)
        if not path.exists():
            path = SCENARIO_DIR / f"{ref}.json"
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            "name": self.name, "topology": self.topology, "adversary": self.adversary,
            "images": self.images, "expected": self.expected, "launches": self.launches,
            "requirements": self.requirements, "description": self.description,
        }


def bundled_scenarios():
    return [Scenario.load(p) for p in sorted(SCENARIO_DIR.glob("*.json"))]


@dataclass
class Report:
    scenario: str
    verdict: str
    expected: str
    passed: bool
    detail: str = ""
    trace: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)
    ciphertext_only: bool | None = None
    custody_hits: list = field(default_factory=list)
    bundles: list = field(default_factory=list, repr=False)
    observations: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "verdict": self.verdict,
            "expected": self.expected,
            "passed": self.passed,
            "detail": self.detail,
            "phases": self.phases,
            "ciphertext_only": self.ciphertext_only,
            "custody_hits": len(self.custody_hits),
            "trace": self.trace,
        }


def image_from_desc(desc, default_name):
    if "path" in desc:
        return CvmImage.from_bytes(Path(desc["path"]).read_bytes())
    return random_image(
        desc.get("seed", 0), desc.get("name", default_name),
        applications=desc.get("applications", 2),
    )


@dataclass
class Observation:
    """Per-launch record kept for tests: evidence, the matching live bank, keys seen."""

    acvm_id: str
    bundle: EvidenceBundle | None
    golden: Golden
    verdict: Verdict | None
    live_bank: object = None
    vm_key: object = field(default=None, repr=False)
    trusted_root: object = None
    nonce: bytes = b""

    def golden_document(self):
        """Golden values plus the user-held inputs the ``verify`` command needs."""
        doc = self.golden.to_dict()
        doc.update(vm_key=self.vm_key.material.hex(), trusted_root=self.trusted_root.to_dict(), nonce=self.nonce.hex())
        return doc


class Deployment:
    """One user node, one CA, one manager, one cloud node and one vTPM host."""

    def __init__(self, transport="local", adversary=None):
        self.network = Network(TOPOLOGIES.get(transport, transport))
        self.ca = CertificateAuthority()
        self.user_root = KeyPair.generate(KeyPairRole.UserNodeRoot)
        self.node = CloudNode(self.network, adversary=adversary)
        self.manager = init_manager(
            self.user_root, self.ca, network=self.network, amd_root=self.node.sp.root
        )
        self.tpmcvm_id = None
        self.handles = {}
        self.session_keys = []
        self.observations = []

    def boot_host(self):
        self.tpmcvm_id = self.manager.launch_tpmcvm(self.node)
        return self.tpmcvm_id

    def register(self, label, image):
        return self.manager.register_acvm("user", image, acvm_id=label)

    def launch(self, label):
        handle = self.manager.launch_acvm(label, self.node, self.tpmcvm_id)
        self.handles[label] = handle
        guest = self.node.guest(handle)
        if guest.agent is not None:
            self.session_keys.append(guest.agent.session_key)
        return handle

    def _live_bank(self, label):
        host = self.node.guest(self.manager.tpm_list[self.tpmcvm_id].handle)
        bound = host.active_vtpms.get(label)
        return None if bound is None else bound.vtpm.bank

    def attest(self, label):
        """Challenge the running ACVM and verify; a halted guest raises."""
        nonce = os.urandom(16)
        evidence = self.node.collect_evidence(self.handles[label], nonce)
        d = self.manager.disclosure(label)
        golden = Golden(d.golden_init, list(d.golden_events), d.expected_counter)
        report = self.node._slot(self.handles[label]).report
        bundle = EvidenceBundle.from_evidence(label, report.measurement, evidence, d.binding_inputs)
        verdict = verify(bundle, golden, d.vm_key, d.trusted_root, nonce)
        obs = Observation(label, bundle, golden, verdict, self._live_bank(label), d.vm_key, d.trusted_root, nonce)
        self.observations.append(obs)
        return verdict, bundle, golden

    def teardown(self, label):
        counter = self.manager.teardown_acvm(label, self.node)
        self.handles.pop(label, None)
        return counter

    def cycle(self, label):
        self.launch(label)
        verdict, *_ = self.attest(label)
        self.teardown(label)
        return verdict

    def custodial_keys(self):
        return [k.material for k in self.manager.custodial_keys()] + [k.material for k in self.session_keys]

    def close(self):
        self.manager.close()
        self.network.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _expected_label(expected):
    return expected.get("verdict") if expected.get("verdict") != "REJECTED" else expected.get("failure", "REJECTED")


def run_scenario(scenario: Scenario, transport=None, trace_path=None) -> Report:
    """Run the full protocol; infrastructure failures propagate as exceptions."""
    transport = transport or TOPOLOGIES[scenario.topology]
    adv = scenario.adversary_config
    phases = {}
    verdict_label, detail = "ACCEPTED", ""
    dep = Deployment(transport, adversary=adv)
    try:
        images = {label: image_from_desc(desc, label) for label, desc in scenario.images.items()}
        victim = next(iter(images))
        t = time.perf_counter()
        verdict_label, detail = _run(dep, scenario, images, victim, adv, phases)
        phases["total"] = round(time.perf_counter() - t, 6)
        hits = dep.node.scan_for(dep.custodial_keys())
    finally:
        dep.close()

    ciphertext_only = None
    if adv.get(AttackKind.EavesdropChannel):
        seen = [e for e in dep.node.eavesdropped if e["payload"]]
        ciphertext_only = bool(seen) and all(e["data_class"] == "ciphertext" for e in seen)
    expected = _expected_label(scenario.expected)
    passed = verdict_label == expected
    if scenario.expected.get("ciphertext_only"):
        passed = passed and bool(ciphertext_only)
    report = Report(
        scenario.name, verdict_label, expected, passed, detail, list(dep.node.trace), phases,
        ciphertext_only, hits, [o.bundle for o in dep.observations if o.bundle], list(dep.observations),
    )
    if trace_path:
        with open(trace_path, "w") as fh:
            for line in report.trace:
                fh.write(json.dumps(line) + "\n")
    return report


def _timed(phases, name, fn, *args):
    t = time.perf_counter()
    try:
        return fn(*args)
    finally:
        phases[name] = round(phases.get(name, 0.0) + time.perf_counter() - t, 6)


def _run(dep, scenario, images, victim, adv, phases):
    try:
        _timed(phases, "tpmcvm-launch", dep.boot_host)
        for label, image in images.items():
            dep.register(label, image)

        redirect = adv.get(AttackKind.RedirectVtpm)
        if redirect:
            accomplice = None
            if redirect.target == "cotenant":
                # a co-tenant guest with the victim's firmware and an empty boot chain
                v = images[victim]
                dep.register("mallory", CvmImage(v.uefi_region, build_payload([]), {"name": "mallory", "kind": "acvm"}))
                _timed(phases, "accomplice-launch", dep.launch, "mallory")
                accomplice = dep.node.guest(dep.handles["mallory"])
            dep.node.rogue = RogueVtpm(redirect.target, accomplice)

        # earlier lifecycles the state-file attacks feed on
        if adv.get(AttackKind.SwapStateFile):
            for label in images:
                _timed(phases, "warmup", dep.cycle, label)
        launches = scenario.launches
        if adv.get(AttackKind.ReplayStateFile):
            launches = max(launches, 3)

        verdict = None
        for i in range(launches):
            final = i == launches - 1
            _timed(phases, "acvm-launch", dep.launch, victim)
            try:
                verdict, *_ = _timed(phases, "attest", dep.attest, victim)
            except ChannelIntegrityError as exc:
                return exc.code, str(exc)
            if not verdict.accepted:
                return verdict.label, verdict.detail
            if not final:
                _timed(phases, "teardown", dep.teardown, victim)
        return verdict.label, verdict.detail
    except LaunchAborted as exc:
        return exc.code, f"step {exc.step}: {exc}"
    except TrustChainError as exc:
        return exc.code, f"step {exc.step}: {exc}"


def bench_tpm_commands(commands=BENCH_COMMANDS, reps=100, transport="local"):
    """Mean latency per command: wrapped session path vs direct vTPM execution."""
    if reps <= 0 or not commands:
        return {}
    with Deployment(transport) as dep:
        dep.boot_host()
        dep.register("bench", random_image(7, "bench"))
        dep.launch("bench")
        agent = dep.node.guest(dep.handles["bench"]).agent
        host = dep.node.guest(dep.manager.tpm_list[dep.tpmcvm_id].handle)
        vtpm = host.active_vtpms["bench"].vtpm

        rc, (obj, _pub) = agent.command(CommandCode.Create)
        digest = hash(b"bench")
        rc, (sig,) = agent.command(CommandCode.Sign, obj, digest)
        raw = {
            "GetRandom": tpmcmd.build(CommandCode.GetRandom, 32),
            "PCR Read": tpmcmd.build(CommandCode.PCR_Read, 0, 1, 2, 3),
            "PCR Extend": tpmcmd.build(CommandCode.PCR_Extend, 16, digest),
            "Hash": tpmcmd.build(CommandCode.Hash, os.urandom(256)),
            "Create": tpmcmd.build(CommandCode.Create),
            "Sign": tpmcmd.build(CommandCode.Sign, obj, digest),
            "Verify Signature": tpmcmd.build(CommandCode.VerifySignature, obj, digest, sig),
        }
        table = {}
        for name in commands:
            cmd = raw[name]
            wrapped, baseline = [], []
            for _ in range(reps):
                t = time.perf_counter_ns()
                agent.transact(cmd)
                wrapped.append(time.perf_counter_ns() - t)
                t = time.perf_counter_ns()
                vtpm.execute(cmd)
                baseline.append(time.perf_counter_ns() - t)
            table[name] = {
                "wrapped_us": statistics.fmean(wrapped) / 1000,
                "baseline_us": statistics.fmean(baseline) / 1000,
                "reps": reps,
            }
        dep.teardown("bench")
    return table
