"""The four credential lifecycle procedures, driven over the simulated network.

Each procedure is a set of role scripts, one generator per participant.  A
script sends by calling helpers on :class:`Run` and receives by yielding a
:class:`Recv`; the run loop pumps the network and hands each delivered
envelope to its addressee.  Any rejected message aborts the whole procedure
(fail-stop), and so does a network that goes idle while a script is still
waiting.

Every step carries a fixed number and label, so a successful run's step
list can be compared verbatim with :data:`GOLDEN`.
Message steps are recorded when sent, handshakes when the initiator sends
M3, local steps when executed; emission order is fixed by the scripts and
so survives reordering on the wire.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Generator, Iterable

from . import crypto, stcp
from .actors import (
    ActorError,
    BusyTa,
    CredentialSet,
    Node,
    Report,
    RevocationAuthority,
    TrustedApp,
    UnknownCredential,
    ma_issue_update,
    possession_proof,
    ma_receive_report,
    ra_check_use,
    ra_lookup,
    ra_register,
    ba_store,
    ba_fetch,
)
from .pki import Identity, KeyUsage, verify_certificate
from .simnet.codec import DecodeError, decode, encode, wire
from .simnet.checks import duplicate_copies, held_by
from .simnet.network import HANDSHAKE, IDLE, RECORD, Envelope
from .world import World

logger = logging.getLogger(__name__)

GOLDEN: dict[str, list[str]] = {
    "migration": [
        "1. STCP", "2. Initiate Migration", "3. Prepare C", "4. Ack.",
        "5. STCP", "6. Prepare Migration from TA_A", "7. Ack.", "8. ID of TA_B",
        "9. STCP", "10. Transfer C", "11. Provision C", "12. Ack.",
        "13. Success", "14. Delete Credentials", "15. Delete C", "16. Success",
    ],
    "revocation": [
        "1. STCP", "2. Reveal C", "3. Unseal C", "4. Show C", "5. STCP",
        "6. Lookup C", "7. Revoked RC", "8. Ack.", "9. Revoke RC",
        "10. Update RC ∈ C", "11. Success",
    ],
    "revocation-maintainer": ["A. STCP", "B. Add Revoked Creds.", "C. Success"],
    "revocation-report": ["D. Report Attempts", "E. Ack."],
    "backup": [
        "1. STCP", "2. Backup Request", "3. Prepare", "4. Ack.", "5. STCP",
        "6. Prepare Backup to BA", "7. Unseal C", "8. Ack.", "9. STCP",
        "10. Transmit C", "11. Store C", "12. Ack.", "13. Success",
    ],
    "update": [
        "1. STCP", "2. Update Ready", "3. Ack.", "4. STCP", "5. Update Ready",
        "6. Prepare and Lock TA", "7. Ack.", "8. STCP", "9. Fetch Credential Update",
        "10. Transmit New Credential c'_i", "11. Seal c'_i and Unlock", "12. Ack.",
        "13. STCP", "14. Revoke c_i", "15. Ack.", "16. Success",
    ],
}
GOLDEN["restore"] = GOLDEN["update"][:12] + GOLDEN["update"][15:]

KINDS = ("migration", "revocation", "backup", "update", "restore")
REPORT_RETRIES = 3


def _labels(kind: str) -> dict[str, str]:
    out = {}
    for key in (kind, "revocation-maintainer", "revocation-report") if kind == "revocation" else (kind,):
        for label in GOLDEN[key]:
            out[label.split(".", 1)[0]] = label
    return out


def _order(kind: str) -> dict[str, int]:
    keys = ("revocation-maintainer", "revocation", "revocation-report") if kind == "revocation" else (kind,)
    seq = [label.split(".", 1)[0] for key in keys for label in GOLDEN[key]]
    return {s: i for i, s in enumerate(seq)}


def expected_steps(kind: str, labels: list[str]) -> bool:
    """Step-order fidelity of a successful run."""
    if kind != "revocation":
        return labels == GOLDEN[kind]
    head = GOLDEN["revocation-maintainer"]
    if labels[: len(head)] == head:
        labels = labels[len(head) :]
    core = GOLDEN["revocation"]
    if labels[: len(core)] != core:
        return False
    tail = labels[len(core) :]
    report = GOLDEN["revocation-report"]
    while tail[:1] == report[:1]:
        # retransmitted reports repeat D before the final E
        tail = tail[1:]
        if tail[:1] == report[1:]:
            tail = tail[1:]
    return not tail


# ---------------------------------------------------------------------------
# outcome


@dataclass
class StepRecord:
    step: str
    src: str
    dst: str
    label: str
    at: int
    payload_digest: str = ""

    def to_json(self) -> dict:
        return {"step": self.step, "from": self.src, "to": self.dst, "label": self.label,
                "at": self.at, "payload_digest": self.payload_digest}


@dataclass
class ProcedureOutcome:
    kind: str
    name: str
    status: str = "Running"
    aborted_step: str | None = None
    reason: str | None = None
    steps: list[StepRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    participants: dict[str, str] = field(default_factory=dict)
    detail: dict[str, Any] = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return self.status == "Success"

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.steps]

    def to_json(self) -> dict:
        return {
            "procedure": self.name, "kind": self.kind, "status": self.status,
            "aborted_step": self.aborted_step, "reason": self.reason,
            "warnings": list(self.warnings), "participants": dict(self.participants),
            "steps": [s.to_json() for s in self.steps],
        }

    def __str__(self) -> str:
        if self.succeeded:
            return f"{self.name}: Success ({len(self.steps)} steps)"
        return f"{self.name}: Aborted({self.aborted_step}, {self.reason})"


class ProcedureAbort(Exception):
    def __init__(self, step: str, reason: str):
        self.step = step
        self.reason = reason
        super().__init__(f"step {step}: {reason}")


# ---------------------------------------------------------------------------
# runtime


@wire(40)
@dataclass(frozen=True)
class StepMessage:
    procedure: str
    step: str
    label: str
    body: Any
    command_sig: bytes | None = None


@wire(41)
@dataclass(frozen=True)
class BackupPayload:
    ta: Identity
    nonce: bytes
    ciphertext: bytes


@dataclass
class Recv:
    step: str
    optional: bool = False
    peer: str | None = None  # only envelopes from this address satisfy the wait


Script = Generator[Recv, "Envelope | None", Any]


@dataclass
class _Task:
    node: Node
    gen: Script
    waiting: Recv | None = None
    inbox: deque = field(default_factory=deque)
    done: bool = False


class Run:
    """One procedure instance: step bookkeeping plus the scheduling loop."""

    def __init__(self, world: World, kind: str):
        self.world = world
        self.kind = kind
        self.name = world.next_run(kind)
        self.outcome = ProcedureOutcome(kind, self.name)
        self.labels = _labels(kind)
        self.order = _order(kind)
        self.sessions: list[stcp.StcpSession] = []
        self.tas: list[TrustedApp] = []

    # bookkeeping ------------------------------------------------------------

    def label(self, step: str) -> str:
        return self.labels[step]

    def record(self, step: str, src: Node, dst: Node, payload: bytes = b"") -> None:
        rec = StepRecord(step, src.identity.id, dst.identity.id, self.label(step),
                         self.world.now, crypto.digest(payload).hex() if payload else "")
        self.outcome.steps.append(rec)
        self.world.log({"type": "step", "procedure": self.name, "kind": self.kind, "seq": len(self.outcome.steps),
                        **rec.to_json()})
        for hook in self.world.step_hooks:
            hook(self, rec)

    def local(self, node: Node, step: str) -> None:
        self.record(step, node, node)

    def warn(self, text: str) -> None:
        self.outcome.warnings.append(text)

    # wire helpers -----------------------------------------------------------

    def send_raw(self, src: Node, dst: str, kind: str, step: str, body: bytes) -> None:
        self.world.network.send(src.identity.id, dst, kind, self.name, step, self.label(step), body)

    def send(self, src: Node, session: stcp.StcpSession, step: str, body: Any,
             sign: bool = False) -> None:
        msg = StepMessage(self.name, step, self.label(step), body)
        if sign:
            sig = crypto.sign(src.command.secret, b"command" + encode(msg))
            msg = StepMessage(self.name, step, self.label(step), body, sig)
        payload = encode(msg)
        record = stcp.send_record(session, payload)
        self.send_raw(src, session.peer.id, RECORD, step, encode(record))
        self.record(step, src, self.world.actor(session.peer), payload)

    def recv(self, me: Node, session: stcp.StcpSession, step: str,
             signed_by: Node | None = None, optional: bool = False):
        """Wait for the step message on ``session`` and return its body."""
        env = yield Recv(step, optional, session.peer.id)
        if env is None:
            return None
        return self.open(session, env, step, signed_by)

    def open(self, session: stcp.StcpSession, env: Envelope, step: str,
             signed_by: Node | None = None):
        """Decrypt and check one step message already taken from the inbox."""
        try:
            record = decode(env.body, stcp.Record)
            payload = stcp.recv_record(session, record)
            msg = decode(payload, StepMessage)
        except DecodeError as exc:
            raise ProcedureAbort(step, f"DecodeError: {exc}") from None
        except stcp.StcpRejected as exc:
            raise ProcedureAbort(step, exc.label) from None
        if env.kind != RECORD:
            raise ProcedureAbort(step, "UnexpectedMessage")
        if msg.procedure != self.name or msg.step != step or msg.label != self.label(step):
            raise ProcedureAbort(step, f"UnexpectedStep({msg.procedure} {msg.step})")
        if signed_by is not None:
            self._check_command(signed_by, msg, step)
        return msg.body

    def _check_command(self, sender: Node, msg: StepMessage, step: str) -> None:
        cert = sender.command_cert
        if not verify_certificate(cert, self.world.ca.root, self.world.now) or cert.usage is not KeyUsage.COMMAND:
            raise ProcedureAbort(step, "BadCommandCert")
        unsigned = StepMessage(msg.procedure, msg.step, msg.label, msg.body)
        if msg.command_sig is None or not crypto.verify(
            cert.public_key, b"command" + encode(unsigned), msg.command_sig
        ):
            raise ProcedureAbort(step, "BadCommandSignature")

    def _decode_handshake(self, env: Envelope | None, step: str, types: tuple) -> Any:
        if env is None or env.kind != HANDSHAKE:
            raise ProcedureAbort(step, "UnexpectedMessage")
        try:
            msg = decode(env.body)
        except DecodeError as exc:
            raise ProcedureAbort(step, f"DecodeError: {exc}") from None
        if not isinstance(msg, types):
            raise ProcedureAbort(step, f"UnexpectedMessage({type(msg).__name__})")
        return msg

    def connect(self, me: Node, peer: Node, step: str, pin: bytes | None = None,
                record: bool = True, optional: bool = False):
        """Initiator side of an STCP handshake.

        With ``optional`` a peer that never answers yields None instead of a
        Timeout abort.
        """
        pending, m1 = stcp.initiate(me.endpoint, peer.identity, me.rng, pin)
        self.send_raw(me, peer.identity.id, HANDSHAKE, step, encode(m1))
        env = yield Recv(step, optional, peer.identity.id)
        if env is None and optional:
            return None
        msg = self._decode_handshake(env, step, (stcp.CookieChallenge, stcp.M2))
        try:
            if isinstance(msg, stcp.CookieChallenge):
                m1 = stcp.answer_cookie(pending, msg)
                self.send_raw(me, peer.identity.id, HANDSHAKE, step, encode(m1))
                env = yield Recv(step, optional, peer.identity.id)
                if env is None and optional:
                    return None
                msg = self._decode_handshake(env, step, (stcp.M2,))
            session, m3 = stcp.complete(pending, msg, self.world.policy, self.world.now)
        except stcp.StcpRejected as exc:
            raise ProcedureAbort(step, exc.label) from None
        self.send_raw(me, peer.identity.id, HANDSHAKE, step, encode(m3))
        if record:
            self.record(step, me, peer)
        self.world.established(session)
        self.sessions.append(session)
        return session

    def accept(self, me: Node, step: str, expect: Node, first: Envelope | None = None):
        """Responder side: stateless cookie round, then M2/M3."""
        while True:
            env, first = (first, None) if first is not None else ((yield Recv(step)), None)
            m1 = self._decode_handshake(env, step, (stcp.M1,))
            try:
                result = stcp.respond(me.endpoint, m1, self.world.policy, me.rng, env.src, self.world.now)
            except stcp.StcpRejected as exc:
                raise ProcedureAbort(step, exc.label) from None
            if isinstance(result, stcp.CookieChallenge):
                self.send_raw(me, env.src, HANDSHAKE, step, encode(result))
                continue
            pending, m2 = result
            break
        self.send_raw(me, env.src, HANDSHAKE, step, encode(m2))
        m3 = self._decode_handshake((yield Recv(step, peer=env.src)), step, (stcp.M3,))
        try:
            session = stcp.finalize(pending, m3, self.world.policy)
        except stcp.StcpRejected as exc:
            raise ProcedureAbort(step, exc.label) from None
        self.world.established(session)
        self.sessions.append(session)
        if session.peer != expect.identity:
            raise ProcedureAbort(step, f"UnexpectedPeer({session.peer})")
        return session

    # scheduling -------------------------------------------------------------

    def drive(self, scripts: dict[Node, Script]) -> None:
        tasks = [_Task(node, gen) for node, gen in scripts.items()]
        by_id = {t.node.identity.id: t for t in tasks}
        for t in tasks:
            self._advance(t, None)
        net = self.world.network
        while True:
            for t in tasks:
                while not t.done and t.waiting is not None:
                    env = self._take(t)
                    if env is None:
                        break
                    self._advance(t, env)
            if all(t.done for t in tasks):
                for t in tasks:
                    for env in t.inbox:
                        self.world.discard(env, "unconsumed")
                return
            env = net.step()
            if env is IDLE:
                optional = [t for t in tasks if not t.done and t.waiting and t.waiting.optional]
                if optional:
                    # one timeout per idle period, so a retransmission can still be answered
                    self._advance(optional[0], None)
                    continue
                waiting = [t.waiting.step for t in tasks if not t.done and t.waiting]
                raise ProcedureAbort(min(waiting, key=self.order.__getitem__), "Timeout")
            task = by_id.get(env.dst)
            if task is None or task.done:
                self.world.discard(env, "unsolicited")
                continue
            task.inbox.append(env)

    @staticmethod
    def _take(task: _Task) -> Envelope | None:
        want = task.waiting.peer
        for i, env in enumerate(task.inbox):
            if want is None or env.src == want:
                del task.inbox[i]
                return env
        return None

    def _advance(self, task: _Task, env: Envelope | None) -> None:
        try:
            task.waiting = task.gen.send(env)
        except StopIteration:
            task.done = True
            task.waiting = None
        except ProcedureAbort:
            raise
        except (stcp.StcpRejected, ActorError, crypto.CryptoError, DecodeError) as exc:
            step = task.waiting.step if task.waiting else "?"
            raise ProcedureAbort(step, f"{type(exc).__name__}: {exc}") from None

    # lifecycle --------------------------------------------------------------

    def claim(self, *tas: TrustedApp) -> None:
        for ta in tas:
            if ta.busy:
                raise BusyTa(f"{ta.identity} is already in a procedure")
        for ta in tas:
            ta.busy = True
            self.tas.append(ta)

    def finish(self, error: ProcedureAbort | None) -> ProcedureOutcome:
        out = self.outcome
        if error is None:
            out.status = "Success"
        else:
            out.status = "Aborted"
            out.aborted_step = error.step
            out.reason = error.reason
        self.world.drain()
        for session in self.sessions:
            session.close()
        for ta in self.tas:
            ta.busy = False
            ta.working = None
        self.world.outcomes.append(out)
        self.world.log({"type": "outcome", **{k: v for k, v in out.to_json().items() if k != "steps"}})
        return out


def _execute(run: Run, body) -> ProcedureOutcome:
    try:
        body()
    except ProcedureAbort as exc:
        return run.finish(exc)
    return run.finish(None)


def _ids(creds: Iterable) -> frozenset[bytes]:
    return frozenset(c.credential_id for c in creds)


def _expect(cond: bool, step: str, reason: str) -> None:
    if not cond:
        raise ProcedureAbort(step, reason)


def _short(ids: Iterable[bytes]) -> list[str]:
    return sorted(i.hex()[:12] for i in ids)


# ---------------------------------------------------------------------------
# migration


def run_migration(world: World, tsm, ta_a, ta_b) -> ProcedureOutcome:
    tsm, ta_a, ta_b = world.actor(tsm), world.actor(ta_a), world.actor(ta_b)
    run = Run(world, "migration")
    run.outcome.participants = {"tsm": tsm.identity.id, "ta_a": ta_a.identity.id, "ta_b": ta_b.identity.id}
    run.claim(ta_a, ta_b)
    moved: set[bytes] = set()
    run.outcome.detail["moved"] = moved

    def tsm_script():
        s_a = yield from run.connect(tsm, ta_a, "1")
        run.send(tsm, s_a, "2", {"command": "initiate-migration"})
        ack = yield from run.recv(tsm, s_a, "4", signed_by=ta_a)
        s_b = yield from run.connect(tsm, ta_b, "5")
        run.send(tsm, s_b, "6", {"from": ta_a.identity, "fingerprint": ta_a.cert.fingerprint})
        yield from run.recv(tsm, s_b, "7", signed_by=ta_b)
        run.send(tsm, s_a, "8", {
            "identity": ta_b.identity, "address": ta_b.identity.id, "fingerprint": ta_b.cert.fingerprint,
        })
        done = yield from run.recv(tsm, s_b, "13", signed_by=ta_b)
        _expect(done["provisioned"] == ack["ids"], "13", "ProvisionMismatch")
        run.send(tsm, s_a, "14", {"delete": done["provisioned"]})
        deleted = yield from run.recv(tsm, s_a, "16", signed_by=ta_a)
        _expect(deleted["deleted"] == done["provisioned"], "16", "DeleteMismatch")

    def ta_a_script():
        s_tsm = yield from run.accept(ta_a, "1", expect=tsm)
        yield from run.recv(ta_a, s_tsm, "2")
        ta_a.working = ta_a.unseal()
        run.local(ta_a, "3")
        sent = ta_a.working.ids
        run.send(ta_a, s_tsm, "4", {"status": "prepared", "ids": sent}, sign=True)
        target = yield from run.recv(ta_a, s_tsm, "8")
        _expect(target["identity"] == ta_b.identity, "8", "UnexpectedTarget")
        s_b = yield from run.connect(ta_a, world.actor(target["address"]), "9", pin=target["fingerprint"])
        run.send(ta_a, s_b, "10", ta_a.working)
        ack = yield from run.recv(ta_a, s_b, "12")
        _expect(ack["provisioned"] == sent, "12", "ProvisionMismatch")
        ta_a.working = None
        order = yield from run.recv(ta_a, s_tsm, "14")
        to_delete = order["delete"]
        _expect(to_delete <= ack["provisioned"], "14", "DeleteUnprovisioned")
        ta_a.delete(to_delete)
        run.local(ta_a, "15")
        run.send(ta_a, s_tsm, "16", {"deleted": to_delete}, sign=True)

    def ta_b_script():
        s_tsm = yield from run.accept(ta_b, "5", expect=tsm)
        prep = yield from run.recv(ta_b, s_tsm, "6")
        source = world.actor(prep["from"])
        run.send(ta_b, s_tsm, "7", {"status": "ready"}, sign=True)
        s_a = yield from run.accept(ta_b, "9", expect=source)
        incoming = yield from run.recv(ta_b, s_a, "10")
        _expect(isinstance(incoming, CredentialSet), "10", "MalformedCredentials")
        ta_b.seal(ta_b.holdings().with_(incoming))
        moved.update(incoming.ids)
        run.local(ta_b, "11")
        run.send(ta_b, s_a, "12", {"provisioned": incoming.ids})
        run.send(ta_b, s_tsm, "13", {"provisioned": incoming.ids, "from": source.identity}, sign=True)

    def body():
        try:
            run.drive({tsm: tsm_script(), ta_a: ta_a_script(), ta_b: ta_b_script()})
        finally:
            holders = held_by(world)
            run.outcome.detail["holders"] = {cid: holders.get(cid, []) for cid in moved}
            for cid, who in sorted(duplicate_copies(world).items()):
                if cid in moved or cid in ta_a.holdings().ids:
                    run.warn(f"credential {cid.hex()[:12]} has copies on {', '.join(who)}")

    return _execute(run, body)


# ---------------------------------------------------------------------------
# revocation


def probe_revoked_use(world: World, ta: TrustedApp, ra: RevocationAuthority, ids: Iterable[bytes]) -> int:
    """Have ``ta`` try to use each id; a relying party checks every use at RA.

    An honest TA has deleted revoked credentials and cannot produce a use.
    Returns the number of uses RA flagged.
    """
    flagged = 0
    for cid in sorted(ids):
        try:
            ta.use_credential(cid, b"probe")
        except (UnknownCredential, ActorError):
            continue
        if not ra_check_use(ra, ta.identity, cid, world.now):
            flagged += 1
    return flagged


def run_revocation(
    world: World,
    tsm,
    ta,
    ra,
    ma=None,
    revoke: Iterable[bytes] = (),
    replacements: Iterable[bytes] = (),
    probe: bool = True,
) -> ProcedureOutcome:
    tsm, ta, ra = world.actor(tsm), world.actor(ta), world.actor(ra)
    ma = world.actor(ma) if ma is not None else None
    revoke = frozenset(revoke)
    replacements = frozenset(replacements)
    run = Run(world, "revocation")
    run.outcome.participants = {"tsm": tsm.identity.id, "ta": ta.identity.id, "ra": ra.identity.id}
    if ma is not None:
        run.outcome.participants["ma"] = ma.identity.id
    run.claim(ta)
    state: dict[str, Any] = {}

    def ma_script():
        s = yield from run.connect(ma, ra, "A")
        state["ma_ra"] = s
        run.send(ma, s, "B", {"revoke": revoke, "replacements": replacements})
        yield from run.recv(ma, s, "C")

    def ra_maintainer_script():
        s = yield from run.accept(ra, "A", expect=ma)
        state["ra_ma"] = s
        req = yield from run.recv(ra, s, "B")
        added = ra_register(ra, req["revoke"], s.peer, world.now, req["replacements"])
        run.send(ra, s, "C", {"added": added})

    def tsm_script():
        s_ta = yield from run.connect(tsm, ta, "1")
        run.send(tsm, s_ta, "2", {"command": "reveal"})
        shown = yield from run.recv(tsm, s_ta, "4", signed_by=ta)
        tsm.revealed[ta.identity] = shown["ids"]
        s_ra = yield from run.connect(tsm, ra, "5")
        run.send(tsm, s_ra, "6", {"ids": shown["ids"]})
        answer = yield from run.recv(tsm, s_ra, "7")
        rc = answer["rc"]
        _expect(rc <= shown["ids"], "7", "RevokedNotSubset")
        run.send(tsm, s_ra, "8", {"ack": True})
        run.send(tsm, s_ta, "9", {"rc": rc})
        done = yield from run.recv(tsm, s_ta, "11", signed_by=ta)
        _expect(done["deleted"] == rc, "11", "RevocationMismatch")
        state["rc"] = rc

    def ta_script():
        s = yield from run.accept(ta, "1", expect=tsm)
        yield from run.recv(ta, s, "2")
        ta.working = ta.unseal()
        run.local(ta, "3")
        # only public identifiers leave the TA
        run.send(ta, s, "4", {"ids": ta.working.ids}, sign=True)
        order = yield from run.recv(ta, s, "9")
        rc = order["rc"]
        _expect(rc <= ta.working.ids, "9", "RevokedNotHeld")
        if not ta.malicious:
            ta.delete(rc)
        ta.working = None
        run.local(ta, "10")
        run.send(ta, s, "11", {"deleted": rc}, sign=True)

    def ra_script():
        s = yield from run.accept(ra, "5", expect=tsm)
        req = yield from run.recv(ra, s, "6")
        rc = ra_lookup(ra, req["ids"], s.peer)
        run.send(ra, s, "7", {"rc": rc})
        yield from run.recv(ra, s, "8")

    def ra_report_script():
        s = state["ra_ma"]
        while ra.pending_reports:
            report = ra.pending_reports[0]
            for attempt in range(1, REPORT_RETRIES + 1):
                if attempt > 1:
                    # a lost record desynchronizes the strict sequence numbers
                    s = yield from run.connect(ra, ma, "D", record=False, optional=True)
                    if s is None:
                        continue
                run.send(ra, s, "D", {"report": report})
                ack = yield from run.recv(ra, s, "E", optional=True)
                if ack is not None:
                    _expect(ack["ack"] == report.report_id, "E", "WrongReportAck")
                    break
            else:
                run.warn(f"report {report.report_id.hex()} undelivered after {REPORT_RETRIES} attempts")
                return
            ra.sent_reports.append(ra.pending_reports.pop(0))

    def ma_report_script():
        s = state["ma_ra"]
        while True:
            env = yield Recv("D", True, ra.identity.id)
            if env is None:
                return
            if env.kind == HANDSHAKE:
                s = yield from run.accept(ma, "D", expect=ra, first=env)
                continue
            body = run.open(s, env, "D")
            report = body["report"]
            _expect(isinstance(report, Report), "D", "MalformedReport")
            run.send(ma, s, "E", {"ack": ma_receive_report(ma, report)})

    def body():
        if ma is not None:
            run.drive({ma: ma_script(), ra: ra_maintainer_script()})
        run.drive({tsm: tsm_script(), ta: ta_script(), ra: ra_script()})
        run.outcome.detail["rc"] = state.get("rc", frozenset())
        if probe and ma is not None:
            if probe_revoked_use(world, ta, ra, run.outcome.detail["rc"]):
                run.drive({ra: ra_report_script(), ma: ma_report_script()})

    return _execute(run, body)


# ---------------------------------------------------------------------------
# backup


def _seal_backup(ta: TrustedApp, creds: CredentialSet) -> bytes:
    nonce = ta.rng.bytes(crypto.AEAD_NONCE_LEN)
    ct = crypto.aead_seal(ta.backup_key(), nonce, b"backup" + encode(ta.identity), encode(creds))
    return encode(BackupPayload(ta.identity, nonce, ct))


def open_backup(ta: TrustedApp, payload: bytes) -> CredentialSet:
    blob = decode(payload, BackupPayload)
    if blob.ta != ta.identity:
        raise crypto.AeadAuthFail("backup belongs to another TA")
    plaintext = crypto.aead_open(ta.backup_key(), blob.nonce, b"backup" + encode(ta.identity), blob.ciphertext)
    return decode(plaintext, CredentialSet)


def run_backup(world: World, tsm, ta, ba) -> ProcedureOutcome:
    tsm, ta, ba = world.actor(tsm), world.actor(ta), world.actor(ba)
    run = Run(world, "backup")
    run.outcome.participants = {"tsm": tsm.identity.id, "ta": ta.identity.id, "ba": ba.identity.id}
    run.claim(ta)

    def tsm_script():
        s_ba = yield from run.connect(tsm, ba, "1")
        run.send(tsm, s_ba, "2", {"ta": ta.identity})
        yield from run.recv(tsm, s_ba, "4")
        s_ta = yield from run.connect(tsm, ta, "5")
        run.send(tsm, s_ta, "6", {"ba": ba.identity, "fingerprint": ba.cert.fingerprint})
        yield from run.recv(tsm, s_ta, "8", signed_by=ta)
        done = yield from run.recv(tsm, s_ba, "13")
        _expect(done["ta"] == ta.identity, "13", "UnexpectedBackupOwner")
        tsm.backups[ta.identity] = (ba.identity, done["backup_id"])
        run.outcome.detail["backup_id"] = done["backup_id"]

    def ba_script():
        s_tsm = yield from run.accept(ba, "1", expect=tsm)
        req = yield from run.recv(ba, s_tsm, "2")
        owner = world.actor(req["ta"])
        run.local(ba, "3")
        run.send(ba, s_tsm, "4", {"ready": True})
        s_ta = yield from run.accept(ba, "9", expect=owner)
        msg = yield from run.recv(ba, s_ta, "10")
        backup_id = ba_store(ba, owner.identity, msg["payload"], s_ta.peer, world.now)
        run.local(ba, "11")
        run.send(ba, s_ta, "12", {"backup_id": backup_id})
        run.send(ba, s_tsm, "13", {"ta": owner.identity, "backup_id": backup_id})

    def ta_script():
        s_tsm = yield from run.accept(ta, "5", expect=tsm)
        order = yield from run.recv(ta, s_tsm, "6")
        target = world.actor(order["ba"])
        ta.working = ta.holdings()
        if not len(ta.working):
            run.warn(f"{ta.identity} has no credentials; backing up an empty set")
        run.local(ta, "7")
        run.send(ta, s_tsm, "8", {"status": "unsealed", "count": len(ta.working)}, sign=True)
        s_ba = yield from run.connect(ta, target, "9", pin=order["fingerprint"])
        run.send(ta, s_ba, "10", {"payload": _seal_backup(ta, ta.working)})
        ta.working = None
        ack = yield from run.recv(ta, s_ba, "12")
        _expect(isinstance(ack.get("backup_id"), bytes), "12", "MalformedAck")

    scripts = {tsm: tsm_script(), ta: ta_script()}
    if ba.available:
        scripts[ba] = ba_script()
    return _execute(run, lambda: run.drive(scripts))


# ---------------------------------------------------------------------------
# update / restore


def run_update(
    world: World,
    ma,
    tsm,
    ta,
    ra,
    source: str = "MA",
    ba=None,
    credentials: Iterable[bytes] | None = None,
) -> ProcedureOutcome:
    """Rotate credentials from the MA, or (``source="BA"``) restore a backup.

    Restore replays the same step sequence with the BA standing in for the MA as
    coordinator and credential source; there is no obsolete credential, so
    the revocation steps 13-15 are skipped.
    """
    ma, tsm, ta = world.actor(ma), world.actor(tsm), world.actor(ta)
    ra = world.actor(ra) if ra is not None else None
    restore = str(source).upper() == "BA"
    kind = "restore" if restore else "update"
    run = Run(world, kind)
    if restore:
        ba = world.actor(ba) if ba is not None else None
        if ba is None:
            raise ValueError("restore needs a backup authority")
        if ta.sealed is not None and len(ta.holdings()):
            raise ValueError(f"restore expects an empty TA; {ta.identity} still holds credentials")
        coordinator = src = ba
        backup = tsm.backups.get(ta.identity)
        if backup is None or backup[0] != ba.identity:
            raise ValueError(f"TSM knows no backup of {ta.identity} at {ba.identity}")
        backup_id = backup[1]
    else:
        coordinator = src = ma
        if ra is None:
            raise ValueError("update needs a revocation authority")
    run.outcome.participants = {"coordinator": coordinator.identity.id, "tsm": tsm.identity.id,
                                "ta": ta.identity.id}
    if ra is not None and not restore:
        run.outcome.participants["ra"] = ra.identity.id
    run.claim(ta)
    targets = None if credentials is None else frozenset(credentials)
    state: dict[str, Any] = {"locked_at": None, "unlocked_at": None}

    def coordinator_script():
        s_tsm = yield from run.connect(coordinator, tsm, "1")
        notice = {"tas": (ta.identity,), "credentials": targets}
        if restore:
            notice["backup_id"] = backup_id
        run.send(coordinator, s_tsm, "2", notice)
        yield from run.recv(coordinator, s_tsm, "3")
        s_ta = yield from run.accept(src, "8", expect=ta)
        fetch = yield from run.recv(src, s_ta, "9")
        if restore:
            payload = ba_fetch(ba, ta.identity, fetch["backup_id"], s_ta.peer)
            run.send(src, s_ta, "10", {"payload": payload})
        else:
            fresh = []
            proofs = fetch["proofs"]
            for old in sorted(fetch["old"]):
                new = ma_issue_update(ma, old, s_ta.peer, proofs.get(old), s_ta.transcript_hash)
                world.register_credential(new)
                fresh.append((old, new))
            state["rotation"] = fresh
            run.send(src, s_ta, "10", {"credentials": tuple(fresh)})
        installed = yield from run.recv(src, s_ta, "12")
        if not restore:
            expected = frozenset(new.credential_id for _, new in state["rotation"])
            _expect(installed["installed"] == expected, "12", "InstallMismatch")
            s_ra = yield from run.connect(ma, ra, "13")
            old_ids = frozenset(old for old, _ in state["rotation"])
            run.send(ma, s_ra, "14", {"revoke": old_ids, "replacements": expected})
            yield from run.recv(ma, s_ra, "15")
        run.send(coordinator, s_tsm, "16", {"status": "updated", "ta": ta.identity})

    def tsm_script():
        s_src = yield from run.accept(tsm, "1", expect=coordinator)
        notice = yield from run.recv(tsm, s_src, "2")
        _expect(ta.identity in notice["tas"], "2", "TaNotTargeted")
        run.send(tsm, s_src, "3", {"ack": True})
        s_ta = yield from run.connect(tsm, ta, "4")
        order = {"source": src.identity, "fingerprint": src.cert.fingerprint,
                 "credentials": notice["credentials"]}
        if restore:
            order["backup_id"] = notice["backup_id"]
        run.send(tsm, s_ta, "5", order)
        yield from run.recv(tsm, s_ta, "7", signed_by=ta)
        yield from run.recv(tsm, s_src, "16")

    def ta_script():
        s_tsm = yield from run.accept(ta, "4", expect=tsm)
        order = yield from run.recv(ta, s_tsm, "5")
        ta.lock()
        state["locked_at"] = world.now
        held = ta.holdings()
        if restore:
            old_ids = frozenset()
        else:
            wanted = order["credentials"]
            old_ids = held.ids if wanted is None else held.ids & frozenset(wanted)
        run.local(ta, "6")
        run.send(ta, s_tsm, "7", {"status": "locked"}, sign=True)
        s_src = yield from run.connect(ta, world.actor(order["source"]), "8", pin=order["fingerprint"])
        if restore:
            run.send(ta, s_src, "9", {"backup_id": order["backup_id"]})
        else:
            proofs = {cid: possession_proof(held.items[cid], s_src.transcript_hash) for cid in old_ids}
            run.send(ta, s_src, "9", {"old": old_ids, "proofs": proofs})
        reply = yield from run.recv(ta, s_src, "10")
        if restore:
            new_set = open_backup(ta, reply["payload"])
            installed = new_set.ids
            ta.seal(held.with_(new_set))
        else:
            pairs = reply["credentials"]
            _expect(frozenset(old for old, _ in pairs) == old_ids, "10", "RotationMismatch")
            fresh = [new for _, new in pairs]
            _expect(all(n.subject == ta.identity for n in fresh), "10", "ForeignCredential")
            installed = _ids(fresh)
            # seal the replacements, drop the obsolete ones, only then unlock
            ta.seal(held.without(old_ids).with_(fresh))
            world.provisioned.update(installed)
        ta.unlock()
        state["unlocked_at"] = world.now
        run.local(ta, "11")
        run.send(ta, s_src, "12", {"installed": installed})

    def ra_script():
        s = yield from run.accept(ra, "13", expect=ma)
        req = yield from run.recv(ra, s, "14")
        added = ra_register(ra, req["revoke"], s.peer, world.now, req["replacements"])
        run.send(ra, s, "15", {"added": added})

    scripts = {coordinator: coordinator_script(), tsm: tsm_script(), ta: ta_script()}
    if not restore:
        scripts[ra] = ra_script()

    def body():
        try:
            run.drive(scripts)
        except ProcedureAbort:
            if ta.locked:
                world.needs_operator_retry.add(ta.identity.id)
                run.warn(f"{ta.identity} left locked with its old credentials; operator retry needed")
            raise
        if not restore:
            run.outcome.detail["rotation"] = {
                old: new.credential_id for old, new in state.get("rotation", [])
            }

    return _execute(run, body)


def run_restore(world: World, ba, tsm, ta, ma=None) -> ProcedureOutcome:
    ma = ma if ma is not None else ba
    return run_update(world, ma, tsm, ta, None, source="BA", ba=ba)


def run_procedure(world: World, kind: str, **params) -> ProcedureOutcome:
    runners = {
        "migration": run_migration,
        "revocation": run_revocation,
        "backup": run_backup,
        "update": run_update,
        "restore": run_restore,
    }
    try:
        runner = runners[kind]
    except KeyError:
        raise ValueError(f"unknown procedure {kind!r}") from None
    return runner(world, **params)
