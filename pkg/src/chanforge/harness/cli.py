"""Command line entry point: ``chanforge run | scenarios | verify``.

Exit codes: 0 when every invariant holds, 1 when one is violated, 2 for
usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from ..engine import trace_hash
from ..errors import ConfigInvalid
from . import config as configmod
from .monitor import INVARIANTS
from .runner import execute, verify_lines
from .scenarios import BUILTINS

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


def _load(target: str, seed: int | None) -> configmod.ScenarioConfig:
    if target in BUILTINS and not os.path.exists(target):
        return configmod.from_dict(BUILTINS[target](), seed)
    return configmod.load(target, seed)


def _print_verdicts(results: dict, out) -> None:
    for name, outcome in results.items():
        status = "pass" if outcome["passed"] else "FAIL"
        line = f"  {status}  {name}"
        if not outcome["passed"]:
            v = outcome["first_violation"]
            line += f"  (event {v['seq']}, round {v['round']}: {v['message']})"
        print(line, file=out)


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed)
    result = execute(cfg)
    report = result.report
    if args.trace:
        result.sim.trace.write(args.trace)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
    print(f"scenario {report.scenario} seed {report.seed}: {report.rounds} rounds, {report.events} events")
    print(f"trace hash {report.trace_hash}")
    _print_verdicts(report.invariants, sys.stdout)
    if report.rejections:
        print("rejections: " + ", ".join(f"{k}={v}" for k, v in report.rejections.items()))
    return EXIT_OK if report.passed else EXIT_VIOLATION


def cmd_scenarios(args) -> int:
    for name, builder in BUILTINS.items():
        print(f"{name:22s} {builder()['description']}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        with open(args.trace) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {args.trace}: {exc}") from None
    monitor = verify_lines(lines)
    print(f"trace hash {trace_hash([ln for ln in lines if ln.strip()])}")
    _print_verdicts(monitor.results(), sys.stdout)
    return EXIT_OK if monitor.passed else EXIT_VIOLATION


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chanforge", description="state-channel protocol simulator")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario (built-in name or JSON config)")
    run.add_argument("config")
    run.add_argument("--trace", help="write the JSON-lines trace here")
    run.add_argument("--report", help="write the JSON report here")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.set_defaults(fn=cmd_run)
    sc = sub.add_parser("scenarios", help="list built-in scenarios")
    sc.set_defaults(fn=cmd_scenarios)
    ver = sub.add_parser("verify", help=f"re-check the {len(INVARIANTS)} invariants over a trace file")
    ver.add_argument("trace")
    ver.set_defaults(fn=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
