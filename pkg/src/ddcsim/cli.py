"""Command-line entry point.

Verbs: run, fuzz, crash-sweep, list-scenarios. A scenario argument is either
a bundled name (see list-scenarios) or a path to a .json file. Exit codes:
0 success, 1 invariant violation, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness, scenario
from .latency import PROFILE_NAMES


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddcsim",
        description="Deterministic disaggregated-rack simulator: memory "
                    "grant/steal, failure notification, and their workloads.")
    sub = parser.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="run one scenario deterministically")
    run_p.add_argument("scenario", help="bundled name or path to .json")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    run_p.add_argument("--profile", choices=PROFILE_NAMES, default=None,
                       help="override the latency profile")
    run_p.add_argument("--trace-out", default=None, metavar="PATH",
                       help="write the event trace as JSON lines")
    run_p.add_argument("--json", action="store_true",
                       help="print the report as JSON")

    fuzz_p = sub.add_parser("fuzz", help="run many seeds, aggregate invariants")
    fuzz_p.add_argument("scenario")
    fuzz_p.add_argument("--seeds", type=int, required=True, metavar="N")
    fuzz_p.add_argument("--seed", type=int, default=None,
                        help="base seed (default: scenario seed)")
    fuzz_p.add_argument("--json", action="store_true")

    sweep_p = sub.add_parser("crash-sweep",
                             help="re-run a heap workload crashing at every "
                                  "event index and check recovery")
    sweep_p.add_argument("scenario")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--stride", type=int, default=1,
                         help="check every Nth crash point")
    sweep_p.add_argument("--json", action="store_true")

    sub.add_parser("list-scenarios", help="list bundled scenarios")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "list-scenarios":
            for name in scenario.bundled_names():
                print(name)
            return 0
        cfg = scenario.load(args.scenario)
        if args.verb == "run":
            report = harness.run(cfg, seed=args.seed,
                                 profile_name=args.profile,
                                 trace_out=args.trace_out)
            print(report.to_json() if args.json else report.text())
            return 0 if report.ok else 1
        if args.verb == "fuzz":
            result = harness.fuzz(cfg, args.seeds, base_seed=args.seed)
            if args.json:
                print(json.dumps(result, sort_keys=True, indent=2))
            else:
                print(f"scenario: {result['scenario']}  seeds: {result['seeds']}")
                for name, count in sorted(result["checks_evaluated"].items()):
                    print(f"  {name:28s} checked x{count}")
                for v in result["violations"][:20]:
                    print(f"  VIOLATION seed={v['seed']} check={v['check']}")
                print("ok" if result["ok"] else
                      f"{len(result['violations'])} violation(s)")
            return 0 if result["ok"] else 1
        if args.verb == "crash-sweep":
            result = harness.crash_sweep(cfg, seed=args.seed,
                                         stride=args.stride)
            if args.json:
                print(json.dumps(result, sort_keys=True, indent=2, default=str))
            else:
                print(f"scenario: {result['scenario']}  "
                      f"crash points: {result['crash_points']}  "
                      f"divergences: {result['n_divergences']}")
                for d in result["divergences"]:
                    print(f"  DIVERGENCE at event {d['crash_at_event']}: "
                          f"{d['problem']}")
                print("ok" if result["ok"] else "FAILED")
            return 0 if result["ok"] else 1
    except scenario.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
