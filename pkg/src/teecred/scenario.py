"""Scenario files: a TOML description of one world plus the procedures to run.

See ``docs/scenario-format.md`` for the grammar.  Validation errors carry the
line of the offending entry so they can be fixed in an editor directly.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .actors import ActorError, RevocationMode, TrustedApp
from .attest import TEE_LAYOUTS
from .pki import Role
from .procedures import ProcedureOutcome, run_procedure
from .simnet.adversary import AdversaryError, AdversaryProgram, Rule
from .simnet.checks import Violation, check_all
from .world import World, WorldError

PROCEDURE_PARAMS: dict[str, dict[str, Role | None]] = {
    "migration": {"tsm": Role.TSM, "ta_a": Role.TA, "ta_b": Role.TA},
    "revocation": {"tsm": Role.TSM, "ta": Role.TA, "ra": Role.RA, "ma": Role.MA},
    "backup": {"tsm": Role.TSM, "ta": Role.TA, "ba": Role.BA},
    "update": {"ma": Role.MA, "tsm": Role.TSM, "ta": Role.TA, "ra": Role.RA},
    "restore": {"ba": Role.BA, "tsm": Role.TSM, "ta": Role.TA},
    "wipe": {"ta": Role.TA},
}
OPTIONAL_PARAMS = {("revocation", "ma")}
LIST_PARAMS = {"revocation": ("revoke",), "update": ("credentials",)}
ROLE_NAMES = {r.name: r for r in Role}


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str = "<scenario>"):
        self.message = message
        self.line = line
        self.path = path
        where = f"{path}:{line}" if line else path
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class ActorSpec:
    id: str
    role: Role
    tee: str | None = None
    trusted: bool = True
    tampered: bool = False
    malicious: bool = False
    credentials: tuple[str, ...] = ()
    issuer: str | None = None


@dataclass(frozen=True)
class ProcedureSpec:
    kind: str
    params: dict[str, Any]
    line: int | None = None


@dataclass
class Scenario:
    name: str
    seed: int
    revocation_mode: RevocationMode
    ca: str
    actors: list[ActorSpec]
    procedures: list[ProcedureSpec]
    adversary: AdversaryProgram = field(default_factory=AdversaryProgram)
    campaign: dict[str, Any] = field(default_factory=dict)


@dataclass
class ScenarioResult:
    world: World
    outcomes: list[ProcedureOutcome]
    violations: list[Violation]

    @property
    def aborted(self) -> bool:
        return any(not o.succeeded for o in self.outcomes)

    @property
    def exit_code(self) -> int:
        if self.violations:
            return 3
        return 2 if self.aborted else 0


class _Lines:
    """Best-effort mapping from values in the document back to line numbers."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def find(self, *needles: str, start: int = 1) -> int | None:
        for i in range(max(start, 1) - 1, len(self.lines)):
            raw = self.lines[i].split("#", 1)[0]
            if all(n in raw for n in needles):
                return i + 1
        return None

    def headers(self, header: str) -> list[int]:
        return [i + 1 for i, ln in enumerate(self.lines) if ln.strip() == header]


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", path=str(path)) from None
    return parse_scenario(text, str(path))


def parse_scenario(text: str, path: str = "<scenario>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ScenarioError(f"syntax error: {exc}", line, path) from None
    lines = _Lines(text)

    def fail(msg: str, *needles: str, line: int | None = None, start: int = 1):
        raise ScenarioError(msg, line or (lines.find(*needles, start=start) if needles else None), path)

    known = {"name", "seed", "revocation_mode", "actors", "procedures", "adversary", "campaign"}
    for key in doc:
        if key not in known:
            fail(f"unknown top-level key {key!r}", key)

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 1 << 64:
        fail("seed must be an unsigned 64-bit integer", "seed")

    # actors --------------------------------------------------------------
    raw_actors = doc.get("actors")
    if not isinstance(raw_actors, list) or not raw_actors:
        fail("scenario needs at least one [[actors]] entry", "actors")
    actor_lines = lines.headers("[[actors]]")
    actors: list[ActorSpec] = []
    ca_names: list[str] = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_actors):
        at = actor_lines[i] if i < len(actor_lines) else None
        extra = set(raw) - {"id", "role", "tee", "trusted", "tampered", "malicious", "credentials", "issuer"}
        if extra:
            fail(f"unknown actor keys {sorted(extra)}", line=at)
        ident = raw.get("id")
        if not isinstance(ident, str) or not ident:
            fail("actor needs a non-empty string id", line=at)
        line = lines.find(f'"{ident}"', start=at or 1) or at
        if ident in seen:
            fail(f"duplicate actor id {ident!r}", line=line)
        seen.add(ident)
        role = ROLE_NAMES.get(str(raw.get("role", "")).upper())
        if role is None:
            fail(f"actor {ident!r}: role must be one of {sorted(ROLE_NAMES)}", line=line)
        if role is Role.CA:
            ca_names.append(ident)
            continue
        tee = raw.get("tee")
        if tee is not None and tee not in TEE_LAYOUTS:
            fail(f"actor {ident!r}: unknown tee {tee!r}", line=line)
        creds = raw.get("credentials", [])
        if not isinstance(creds, list) or not all(isinstance(c, str) for c in creds):
            fail(f"actor {ident!r}: credentials must be a list of names", line=line)
        if creds and role is not Role.TA:
            fail(f"actor {ident!r}: only TAs hold credentials", line=line)
        for flag in ("trusted", "tampered", "malicious"):
            if not isinstance(raw.get(flag, False), bool):
                fail(f"actor {ident!r}: {flag} must be true or false", line=line)
        if raw.get("malicious") and role is not Role.TA:
            fail(f"actor {ident!r}: only TAs can be malicious", line=line)
        actors.append(ActorSpec(
            ident, role, tee, raw.get("trusted", True), raw.get("tampered", False),
            raw.get("malicious", False), tuple(creds), raw.get("issuer"),
        ))
    if len(ca_names) > 1:
        fail(f"exactly one CA allowed, found {len(ca_names)}", f'"{ca_names[1]}"')
    by_id = {a.id: a for a in actors}
    for a in actors:
        if a.credentials:
            issuer = a.issuer or next((b.id for b in actors if b.role is Role.TSM), None)
            if issuer not in by_id:
                fail(f"actor {a.id!r}: issuer {issuer!r} is not defined", f'"{a.id}"')
            if by_id[issuer].role not in (Role.TSM, Role.MA):
                fail(f"actor {a.id!r}: issuer must be a TSM or MA", f'"{a.id}"')

    mode = doc.get("revocation_mode")
    has_ra = any(a.role is Role.RA for a in actors)
    if has_ra and mode is None:
        fail("revocation_mode must be set when an RA is present", "role", "RA")
    try:
        mode = RevocationMode(mode or "blacklist")
    except ValueError:
        fail(f"revocation_mode must be 'blacklist' or 'whitelist', not {mode!r}", "revocation_mode")

    # procedures ------------------------------------------------------------
    raw_procs = doc.get("procedures", [])
    if not isinstance(raw_procs, list):
        fail("procedures must be an array of tables", "procedures")
    proc_lines = lines.headers("[[procedures]]")
    procedures: list[ProcedureSpec] = []
    for i, raw in enumerate(raw_procs):
        at = proc_lines[i] if i < len(proc_lines) else None
        kind = raw.get("kind")
        if kind not in PROCEDURE_PARAMS:
            fail(f"unknown procedure kind {kind!r}; expected one of {sorted(PROCEDURE_PARAMS)}", line=at)
        roles = PROCEDURE_PARAMS[kind]
        allowed = set(roles) | set(LIST_PARAMS.get(kind, ())) | {"kind"}
        for key in raw:
            if key not in allowed:
                fail(f"{kind}: unknown parameter {key!r}", key, start=at or 1)
        params: dict[str, Any] = {}
        for key, role in roles.items():
            ref = raw.get(key)
            if ref is None:
                if (kind, key) in OPTIONAL_PARAMS:
                    continue
                fail(f"{kind}: missing participant {key!r}", line=at)
            line = lines.find(key, f'"{ref}"', start=at or 1) or at
            if ref not in by_id:
                fail(f"{kind}: {key} refers to undefined actor {ref!r}", line=line)
            if by_id[ref].role is not role:
                fail(f"{kind}: {key} must be a {role.name}, {ref!r} is a {by_id[ref].role.name}", line=line)
            params[key] = ref
        for key in LIST_PARAMS.get(kind, ()):
            if key in raw:
                refs = raw[key]
                if not isinstance(refs, list) or not all(isinstance(r, str) and ":" in r for r in refs):
                    fail(f"{kind}: {key} must list credentials as \"ta:name\"", key, start=at or 1)
                for ref in refs:
                    owner, name = ref.split(":", 1)
                    if owner not in by_id or name not in by_id[owner].credentials:
                        fail(f"{kind}: unknown credential {ref!r}", f'"{ref}"', start=at or 1)
                params[key] = list(refs)
        if kind == "revocation" and params.get("revoke") and "ma" not in params:
            fail("revocation: revoke needs an ma participant", line=at)
        if kind == "migration" and params["ta_a"] == params["ta_b"]:
            fail("migration: ta_a and ta_b must differ", line=at)
        procedures.append(ProcedureSpec(kind, params, at))

    # adversary -------------------------------------------------------------
    adv = doc.get("adversary", {})
    if not isinstance(adv, dict):
        fail("adversary must be a table", "adversary")
    compromise = adv.get("compromise", [])
    for ref in compromise:
        if ref not in by_id:
            fail(f"adversary: compromise names undefined actor {ref!r}", "compromise")
    rules = []
    rule_lines = lines.headers("[[adversary.rules]]")
    for i, raw in enumerate(adv.get("rules", [])):
        at = rule_lines[i] if i < len(rule_lines) else lines.find("adversary")
        try:
            rule = Rule.from_json(raw)
        except (AdversaryError, KeyError, TypeError, ValueError) as exc:
            fail(f"adversary rule: {exc}", line=at)
        for key in ("src", "dst"):
            if key in rule.match and rule.match[key] not in by_id:
                fail(f"adversary rule matches undefined actor {rule.match[key]!r}", line=at)
        rules.append(rule)
    program = AdversaryProgram(tuple(rules), int(adv.get("seed", 0)), tuple(compromise))

    campaign = doc.get("campaign", {})
    if not isinstance(campaign, dict):
        fail("campaign must be a table", "campaign")

    name = doc.get("name") or Path(path).stem
    return Scenario(str(name), seed, mode, ca_names[0] if ca_names else "ca", actors, procedures,
                    program, campaign)


# ---------------------------------------------------------------------------
# execution


def build_world(scenario: Scenario, seed: int | None = None,
                program: AdversaryProgram | None = None) -> World:
    seed = scenario.seed if seed is None else seed
    world = World(seed, scenario.revocation_mode, scenario.ca)
    for a in scenario.actors:
        options = {"malicious": True} if a.malicious else {}
        world.add(a.id, a.role, a.tee, a.trusted, a.tampered, **options)
    for a in scenario.actors:
        if a.credentials:
            issuer = a.issuer or world.of_role(Role.TSM)[0].identity.id
            world.issue(a.id, a.credentials, issuer)
    world.arm(program if program is not None else scenario.adversary)
    return world


def resolve_credential(world: World, ref: str) -> bytes:
    """``"ta:name"`` to the id of the newest issued version."""
    owner, name = ref.split(":", 1)
    found = [c for c in world.issued.values() if c.subject.id == owner and c.name == name]
    if not found:
        raise WorldError(f"no credential {ref!r}")
    return max(found, key=lambda c: c.version).credential_id


def _precondition_failure(world: World, spec: ProcedureSpec, exc: Exception) -> ProcedureOutcome:
    name = world.next_run(spec.kind)
    out = ProcedureOutcome(spec.kind, name, "Aborted", "precondition", f"{type(exc).__name__}: {exc}")
    world.outcomes.append(out)
    world.log({"type": "outcome", **{k: v for k, v in out.to_json().items() if k != "steps"}})
    return out


def run_step(world: World, spec: ProcedureSpec) -> ProcedureOutcome | None:
    params = dict(spec.params)
    if spec.kind == "wipe":
        ta = world.actor(params["ta"])
        assert isinstance(ta, TrustedApp)
        ta.wipe()
        world.log({"type": "operator", "action": "wipe", "ta": ta.identity.id, "at": world.now})
        return None
    for key in LIST_PARAMS.get(spec.kind, ()):
        if key in params:
            params[key] = [resolve_credential(world, r) for r in params[key]]
    try:
        return run_procedure(world, spec.kind, **params)
    except (ValueError, ActorError) as exc:
        return _precondition_failure(world, spec, exc)


def execute(scenario: Scenario, seed: int | None = None,
            program: AdversaryProgram | None = None) -> ScenarioResult:
    world = build_world(scenario, seed, program)
    outcomes = []
    for spec in scenario.procedures:
        out = run_step(world, spec)
        if out is not None:
            outcomes.append(out)
    world.drain()
    violations = check_all(world)
    for v in violations:
        world.log({"type": "violation", **v.to_json()})
    return ScenarioResult(world, outcomes, violations)


BUNDLED_DIR = Path(__file__).parent / "scenarios"


def bundled(name: str) -> Path:
    path = BUNDLED_DIR / (name if name.endswith(".toml") else name + ".toml")
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def bundled_names() -> list[str]:
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.toml"))
