"""Randomized attack campaigns over a scenario.

Each run draws a handful of adversary rules from one family, aimed at
envelope sequence numbers seen in an honest dry run, executes the scenario
and applies every invariant checker.  Runs with violations get their rule
list shrunk greedily to a minimal reproducer.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .. import crypto
from .adversary import TAMPER_MODES, AdversaryProgram, Rule

if TYPE_CHECKING:
    from ..scenario import Scenario, ScenarioResult

FAMILIES = ("drop", "replay", "tamper", "mixed")
MAX_RULES = 3


class CampaignError(ValueError):
    pass


@dataclass
class RunSummary:
    index: int
    seed: int
    rules: list[dict]
    outcomes: list[dict]
    violations: list[dict]
    minimized: list[dict] | None = None

    def to_json(self) -> dict:
        out = {"run": self.index, "seed": self.seed, "rules": self.rules,
               "outcomes": self.outcomes, "violations": self.violations}
        if self.minimized is not None:
            out["minimized_rules"] = self.minimized
        return out


@dataclass
class CampaignReport:
    scenario: str
    family: str
    runs: int
    seed: int
    envelopes: int
    results: list[RunSummary] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(len(r.violations) for r in self.results)

    @property
    def findings(self) -> list[RunSummary]:
        return [r for r in self.results if r.violations]

    @property
    def aborted_runs(self) -> int:
        return sum(any(o["status"] != "Success" for o in r.outcomes) for r in self.results)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario, "family": self.family, "runs": self.runs, "seed": self.seed,
            "honest_envelopes": self.envelopes, "violations": self.violations,
            "aborted_runs": self.aborted_runs,
            "results": [r.to_json() for r in sorted(self.results, key=lambda r: r.index)],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def _rule(rng: crypto.SeededRandom, kind: str, seq: int) -> Rule:
    match = {"seq": seq}
    if kind == "drop":
        return Rule(match, "drop")
    if kind == "replay":
        return Rule(match, "replay", {"after": rng.randrange(0, 6)})
    if kind == "replay_history":
        return Rule(match, "replay_history")
    if kind == "tamper":
        return Rule(match, "tamper", {"mode": rng.choice(TAMPER_MODES)})
    if kind == "delay":
        return Rule(match, "delay", {"n": rng.randrange(1, 8)})
    if kind == "inject":
        return Rule(match, "inject", {"junk": rng.randrange(1, 96)})
    raise CampaignError(kind)


def random_rules(rng: crypto.SeededRandom, family: str, envelopes: int) -> list[Rule]:
    if family not in FAMILIES:
        raise CampaignError(f"unknown adversary family {family!r}")
    kinds = {
        "drop": ("drop",),
        "replay": ("replay", "replay_history"),
        "tamper": ("tamper",),
        "mixed": ("drop", "replay", "replay_history", "tamper", "delay", "inject"),
    }[family]
    count = 1 + rng.randrange(MAX_RULES)
    return [_rule(rng, rng.choice(kinds), 1 + rng.randrange(max(envelopes, 1))) for _ in range(count)]


def _violating(scenario: Scenario, seed: int, program: AdversaryProgram) -> bool:
    from ..scenario import execute

    return bool(execute(scenario, seed, program).violations)


def minimize(scenario: Scenario, seed: int, program: AdversaryProgram) -> AdversaryProgram:
    """Drop rules one at a time while the violation persists."""
    rules = list(program.rules)
    i = 0
    while i < len(rules):
        trial = program.with_rules(rules[:i] + rules[i + 1 :])
        if _violating(scenario, seed, trial):
            rules = list(trial.rules)
        else:
            i += 1
    return program.with_rules(rules)


def _summary(index: int, seed: int, program: AdversaryProgram, result: ScenarioResult) -> RunSummary:
    outcomes = [{k: v for k, v in o.to_json().items() if k in ("procedure", "status", "aborted_step", "reason")}
                for o in result.outcomes]
    return RunSummary(index, seed, [r.to_json() for r in program.rules], outcomes,
                      [v.to_json() for v in result.violations])


def honest_envelopes(scenario: Scenario) -> int:
    from ..scenario import execute

    result = execute(scenario)
    return result.world.network.sent


def run_one(scenario: Scenario, family: str, index: int, seed: int, envelopes: int,
            shrink: bool = True) -> RunSummary:
    from ..scenario import execute

    rng = crypto.SeededRandom(f"campaign:{seed}:{index}")
    run_seed = rng.randrange(1 << 63)
    base = scenario.adversary
    program = AdversaryProgram(
        base.rules + tuple(random_rules(rng, family, envelopes)), run_seed, base.compromise
    )
    result = execute(scenario, scenario.seed, program)
    summary = _summary(index, run_seed, program, result)
    if result.violations and shrink:
        summary.minimized = [r.to_json() for r in minimize(scenario, scenario.seed, program).rules]
    return summary


def run_campaign(scenario: Scenario, family: str, runs: int, seed: int,
                 workers: int = 1, shrink: bool = True) -> CampaignReport:
    if runs < 1:
        raise CampaignError("runs must be at least 1")
    if family not in FAMILIES:
        raise CampaignError(f"unknown adversary family {family!r}")
    envelopes = honest_envelopes(scenario)
    report = CampaignReport(scenario.name, family, runs, seed, envelopes)

    def job(i: int) -> RunSummary:
        return run_one(scenario, family, i, seed, envelopes, shrink)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            report.results = list(pool.map(job, range(runs)))
    else:
        report.results = [job(i) for i in range(runs)]
    report.results.sort(key=lambda r: r.index)
    return report
