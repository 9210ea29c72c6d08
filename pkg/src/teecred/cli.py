"""Command-line entry point: ``teecred run | attack | verify-transcript | list``.

Exit codes: 0 clean, 1 bad input, 2 a procedure aborted, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import defaultdict
from pathlib import Path

from . import crypto
from .actors import Credential, CredentialSet
from .procedures import KINDS, expected_steps
from .scenario import Scenario, ScenarioError, bundled, bundled_names, execute, load_scenario
from .simnet.campaign import FAMILIES, CampaignError, run_campaign
from .simnet.codec import DecodeError, decode
from .simnet.network import RECORD

EXIT_OK, EXIT_INPUT, EXIT_ABORTED, EXIT_VIOLATION = 0, 1, 2, 3
SEED_ENV = "TEECRED_SEED"


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _default_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return _u64(raw)
    except argparse.ArgumentTypeError as exc:
        raise UsageError(f"{SEED_ENV}: {exc}") from None


def _scenario(ref: str) -> Scenario:
    path = Path(ref)
    if not path.exists() and ref in bundled_names():
        path = bundled(ref)
    return load_scenario(path)


def _write(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    scenario = _scenario(args.scenario)
    seed = args.seed if args.seed is not None else _default_seed()
    result = execute(scenario, seed)
    if args.transcript:
        _write(args.transcript, result.world.transcript_jsonl())
    for out in result.outcomes:
        print(out, file=sys.stderr)
        for w in out.warnings:
            print(f"  warning: {w}", file=sys.stderr)
    for v in result.violations:
        print(f"violation: {v}", file=sys.stderr)
    return result.exit_code


def cmd_attack(args) -> int:
    scenario = _scenario(args.scenario)
    family = args.family or scenario.campaign.get("family", "mixed")
    runs = args.runs if args.runs is not None else int(scenario.campaign.get("runs", 100))
    if family not in FAMILIES:
        raise UsageError(f"--family must be one of {', '.join(FAMILIES)}")
    if runs < 1:
        raise UsageError("--runs must be at least 1")
    seed = args.seed if args.seed is not None else (_default_seed() or scenario.seed)
    report = run_campaign(scenario, family, runs, seed, workers=args.workers, shrink=not args.no_shrink)
    if args.report:
        _write(args.report, report.dumps())
    print(f"{scenario.name}: {runs} {family} runs, {report.aborted_runs} aborted, "
          f"{report.violations} violations", file=sys.stderr)
    for finding in report.findings[:5]:
        print(f"  run {finding.index}: {finding.violations[0]['invariant']}: "
              f"{finding.violations[0]['detail']}", file=sys.stderr)
    return EXIT_VIOLATION if report.violations else EXIT_OK


def _contains_credential(value, depth: int = 0) -> bool:
    if isinstance(value, (Credential, CredentialSet)):
        return True
    if depth > 32:
        return False
    if isinstance(value, dict):
        return any(_contains_credential(v, depth + 1) for kv in value.items() for v in kv)
    if isinstance(value, (list, tuple, frozenset, set)):
        return any(_contains_credential(v, depth + 1) for v in value)
    if hasattr(value, "__dataclass_fields__"):
        return any(_contains_credential(getattr(value, f), depth + 1) for f in value.__dataclass_fields__)
    return False


def verify_transcript_lines(lines: list[dict]) -> list[str]:
    """Offline checks of a JSON-lines transcript; returns problems found."""
    problems: list[str] = []
    steps: dict[str, list[str]] = defaultdict(list)
    kinds: dict[str, str] = {}
    status: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        kind = line.get("type")
        if kind == "envelope":
            body = bytes.fromhex(line["body_hex"])
            if crypto.digest(body).hex() != line["body_hex_digest"]:
                problems.append(f"line {n}: body digest mismatch")
            if line["kind"] == RECORD:
                continue
            try:
                value = decode(body)
            except DecodeError:
                continue
            if _contains_credential(value):
                problems.append(f"line {n}: credential material outside an established record")
        elif kind == "step":
            steps[line["procedure"]].append(line["label"])
            kinds[line["procedure"]] = line["kind"]
        elif kind == "outcome":
            status[line["procedure"]] = line["status"]
            kinds[line["procedure"]] = line["kind"]
        elif kind == "violation":
            problems.append(f"line {n}: recorded violation {line.get('invariant')}")
    for proc, st in status.items():
        if st == "Success" and not expected_steps(kinds[proc], steps.get(proc, [])):
            problems.append(f"{proc}: step order differs from the {kinds[proc]} sequence")
    return problems


def cmd_verify_transcript(args) -> int:
    path = Path(args.path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    lines = []
    for n, raw in enumerate(text.splitlines(), 1):
        if not raw.strip():
            continue
        try:
            line = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{n}: not JSON: {exc.msg}") from None
        if not isinstance(line, dict) or "type" not in line:
            raise UsageError(f"{path}:{n}: transcript lines are objects with a 'type'")
        lines.append(line)
    if not lines:
        raise UsageError(f"{path}: empty transcript")
    try:
        problems = verify_transcript_lines(lines)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"{path}: malformed transcript entry: {exc}") from None
    for p in problems:
        print(p, file=sys.stderr)
    return EXIT_VIOLATION if problems else EXIT_OK


def cmd_list(args) -> int:
    for name in bundled_names():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teecred", description="Simulate TEE credential procedures under a network adversary.",
        epilog="exit codes: 0 clean, 1 bad input, 2 a procedure aborted, 3 invariant violation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario's procedures in order")
    run.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    run.add_argument("--seed", type=_u64, help=f"world seed (default: ${SEED_ENV}, then the scenario's)")
    run.add_argument("--transcript", help="write the JSON-lines transcript here ('-' for stdout)")
    run.set_defaults(func=cmd_run)

    attack = sub.add_parser("attack", help="run a randomized adversary campaign")
    attack.add_argument("--scenario", required=True)
    attack.add_argument("--family", help=f"one of {', '.join(FAMILIES)}")
    attack.add_argument("--runs", type=int)
    attack.add_argument("--seed", type=_u64)
    attack.add_argument("--report", help="write the JSON campaign report here")
    attack.add_argument("--workers", type=int, default=1)
    attack.add_argument("--no-shrink", action="store_true", help="skip minimizing violating rule lists")
    attack.set_defaults(func=cmd_attack)

    verify = sub.add_parser("verify-transcript", help="re-check a transcript offline")
    verify.add_argument("path")
    verify.set_defaults(func=cmd_verify_transcript)

    lst = sub.add_parser("list", help=f"list bundled scenarios ({', '.join(KINDS)}, ...)")
    lst.set_defaults(func=cmd_list)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (UsageError, CampaignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
