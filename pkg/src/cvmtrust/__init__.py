"""Hardware-free simulator of a confidential-VM trust chain with a vTPM host."""

from .errors import TrustChainError
from .manager import init_manager
from .scenario import Deployment, Scenario, bench_tpm_commands, run_scenario
from .verifier import EvidenceBundle, Verdict, replay_log, verify

__version__ = "0.1.0"

__all__ = [
    "Deployment",
    "EvidenceBundle",
    "Scenario",
    "TrustChainError",
    "Verdict",
    "bench_tpm_commands",
    "init_manager",
    "replay_log",
    "run_scenario",
    "verify",
]
