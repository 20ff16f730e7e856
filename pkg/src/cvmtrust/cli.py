"""Command line entry point: run scenarios, verify bundles, benchmark commands."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .crypto import Certificate, SymmetricKey, KeyRole
from .errors import TransportError
from .scenario import BENCH_COMMANDS, Scenario, bench_tpm_commands, bundled_scenarios, run_scenario
from .verifier import EvidenceBundle, Golden, verify

EXIT_PASS, EXIT_MISMATCH, EXIT_INFRA = 0, 1, 2


def _run(args):
    scenarios = bundled_scenarios() if args.scenario == "all" else [Scenario.load(args.scenario)]
    code = EXIT_PASS
    for sc in scenarios:
        report = run_scenario(sc, transport=args.transport, trace_path=args.trace)
        done = [o for o in report.observations if o.bundle is not None]
        if args.evidence_out and done:
            with open(args.evidence_out, "w") as fh:
                fh.write(done[-1].bundle.to_json())
        if args.golden_out and done:
            with open(args.golden_out, "w") as fh:
                json.dump(done[-1].golden_document(), fh, indent=2)
        if args.json:
            out = report.to_dict()
            if not args.full_trace:
                out.pop("trace")
            print(json.dumps(out, indent=2))
        else:
            status = "PASS" if report.passed else "FAIL"
            print(f"{status} {sc.name}: verdict={report.verdict} expected={report.expected} ({report.detail})")
        if not report.passed:
            code = EXIT_MISMATCH
    return code


def _verify(args):
    with open(args.bundle) as fh:
        bundle = EvidenceBundle.from_json(fh.read())
    with open(args.golden) as fh:
        g = json.load(fh)
    golden = Golden.from_dict(g)
    vm_key = SymmetricKey(bytes.fromhex(g["vm_key"]), KeyRole.VmKey)
    root = Certificate.from_dict(g["trusted_root"])
    nonce = bytes.fromhex(g.get("nonce", bundle.quote.nonce.hex()))
    verdict = verify(bundle, golden, vm_key, root, nonce)
    print(json.dumps(verdict.to_dict(), indent=2))
    expected = g.get("expect")
    if expected is None:
        return EXIT_PASS if verdict.accepted else EXIT_MISMATCH
    return EXIT_PASS if verdict.label == expected else EXIT_MISMATCH


def _bench(args):
    table = bench_tpm_commands(args.commands or BENCH_COMMANDS, args.reps, args.transport)
    if args.json:
        print(json.dumps(table, indent=2))
    else:
        print(f"{'command':<18}{'wrapped us':>12}{'baseline us':>13}")
        for name, row in table.items():
            print(f"{name:<18}{row['wrapped_us']:>12.1f}{row['baseline_us']:>13.1f}")
    return EXIT_PASS


def build_parser():
    p = argparse.ArgumentParser(prog="cvmtrust", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario file, a bundled scenario name, or 'all'")
    r.add_argument("--scenario", required=True)
    r.add_argument("--transport", choices=("local", "tcp"))
    r.add_argument("--trace", help="write the node trace as JSON lines")
    r.add_argument("--evidence-out", help="write the last evidence bundle as JSON")
    r.add_argument("--golden-out", help="write golden values and verifier inputs as JSON")
    r.add_argument("--json", action="store_true", help="print the report as JSON")
    r.add_argument("--full-trace", action="store_true", help="include the trace in JSON output")
    r.set_defaults(fn=_run)

    v = sub.add_parser("verify", help="verify an evidence bundle against golden values")
    v.add_argument("--bundle", required=True)
    v.add_argument("--golden", required=True)
    v.set_defaults(fn=_verify)

    b = sub.add_parser("bench", help="TPM command latency, wrapped vs direct")
    b.add_argument("--reps", type=int, default=100)
    b.add_argument("--transport", choices=("local", "tcp"), default="local")
    b.add_argument("--commands", nargs="*", choices=BENCH_COMMANDS)
    b.add_argument("--json", action="store_true")
    b.set_defaults(fn=_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR)
    try:
        return args.fn(args)
    except (TransportError, OSError) as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except (ValueError, KeyError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
