"""Invariant checkers run against a finished world."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .. import crypto
from ..actors import BackupAuthority, MaintenanceAuthority, RevocationAuthority, TrustedApp

if TYPE_CHECKING:
    from ..world import World


@dataclass(frozen=True)
class Violation:
    invariant: str
    detail: str

    def to_json(self) -> dict:
        return {"invariant": self.invariant, "detail": self.detail}

    def __str__(self) -> str:
        return f"{self.invariant}: {self.detail}"


def check_secrecy(world: World) -> list[Violation]:
    """No registered secret appears on the wire or in adversary knowledge."""
    granted = getattr(world, "granted", set())
    haystacks = list(world.network.bodies)
    if world.adversary is not None:
        haystacks += world.adversary.knowledge
        haystacks += world.adversary.decrypted
    blob = b"\x00".join(haystacks)
    out = []
    for label, value in sorted(world.secrets.items()):
        if label in granted or len(value) < 16:
            continue
        if value in blob:
            out.append(Violation("secrecy", f"{label} exposed"))
    return out


def _backed_up(world: World) -> set[bytes]:
    from ..procedures import open_backup

    found: set[bytes] = set()
    for ba in world.actors.values():
        if not isinstance(ba, BackupAuthority):
            continue
        for (owner, _), entry in ba.store.items():
            ta = world.actors.get(owner.id)
            if not isinstance(ta, TrustedApp):
                continue
            try:
                found |= open_backup(ta, entry.payload).ids
            except Exception:
                continue
    return found


def held_by(world: World) -> dict[bytes, list[str]]:
    out: dict[bytes, list[str]] = {}
    for ta in world.tas():
        for cid in ta.holdings().ids:
            out.setdefault(cid, []).append(ta.identity.id)
    return out


def check_no_loss(world: World) -> list[Violation]:
    """Every provisioned, unrevoked credential keeps a sealed or backed-up copy."""
    holders = held_by(world)
    backups = _backed_up(world)
    ras = [a for a in world.actors.values() if isinstance(a, RevocationAuthority)]
    superseded: dict[bytes, bytes] = {}
    for ma in world.actors.values():
        if isinstance(ma, MaintenanceAuthority):
            superseded.update(ma.superseded)

    def live_copy(cid: bytes, depth: int = 0) -> bool:
        if cid in holders or cid in backups:
            return True
        nxt = superseded.get(cid)
        return nxt is not None and depth < 64 and live_copy(nxt, depth + 1)

    out = []
    for cid in sorted(world.provisioned):
        cred = world.issued[cid]
        if any(ra.mrl.is_revoked(cid) for ra in ras):
            continue
        if not live_copy(cid):
            out.append(Violation("no-loss", f"{cred.subject}/{cred.name} v{cred.version} has no copy"))
    return out


def check_single_holder(world: World) -> list[Violation]:
    """After a successful migration each moved credential has exactly one holder."""
    out = []
    for outcome in world.outcomes:
        if outcome.kind != "migration" or not outcome.succeeded:
            continue
        # holder snapshot taken when the migration finished
        for cid, who in sorted(outcome.detail.get("holders", {}).items()):
            n = len(who)
            if n != 1:
                out.append(Violation("single-holder", f"{cid.hex()[:12]} held by {n} TAs"))
    return out


def duplicate_copies(world: World) -> dict[bytes, list[str]]:
    return {cid: who for cid, who in held_by(world).items() if len(who) > 1}


def check_mutual_trust(world: World) -> list[Violation]:
    """Honest ends only establish sessions with attested, trusted peers."""
    granted = {label.split("/")[0] for label in getattr(world, "granted", set())}
    out = []
    for sid, pair in sorted(world.sessions.items()):
        for end in (pair.initiator, pair.responder):
            if end is None:
                continue
            if not end.peer_quote:
                out.append(Violation("mutual-trust", f"{sid.hex()[:12]} quote {end.peer_quote}"))
                continue
            peer = world.actors.get(end.peer.id)
            if peer is None or end.peer.id in granted:
                continue
            actual = peer.endpoint.measurements.digest
            if actual not in world.policy.expected.get(end.peer, set()):
                out.append(Violation("mutual-trust", f"{end.local} trusted untrustworthy {end.peer}"))
    return out


def check_key_agreement(world: World) -> list[Violation]:
    out = []
    for sid, pair in sorted(world.sessions.items()):
        if pair.initiator is None or pair.responder is None:
            continue
        prefix = f"session/{sid.hex()}/"
        for name in pair.initiator.keys:
            a = world.secrets.get(prefix + "initiator/" + name)
            b = world.secrets.get(prefix + "responder/" + name)
            if a is None or not crypto.mac_equal(a, b or b""):
                out.append(Violation("key-agreement", f"{sid.hex()[:12]} {name} differs"))
    return out


def check_balance(world: World) -> list[Violation]:
    net = world.network
    if net.balanced():
        return []
    return [Violation("network-balance",
                      f"sent {net.sent} + injected {net.injected} != delivered {net.delivered} "
                      f"+ dropped {net.dropped} (queued {net.pending})")]


def check_step_order(world: World) -> list[Violation]:
    from ..procedures import expected_steps

    return [
        Violation("step-order", f"{o.name}: {o.labels}")
        for o in world.outcomes
        if o.succeeded and not expected_steps(o.kind, o.labels)
    ]


CHECKS = {
    "secrecy": check_secrecy,
    "no-loss": check_no_loss,
    "single-holder": check_single_holder,
    "mutual-trust": check_mutual_trust,
    "key-agreement": check_key_agreement,
    "network-balance": check_balance,
    "step-order": check_step_order,
}


def check_all(world: World, only: tuple[str, ...] | None = None) -> list[Violation]:
    out: list[Violation] = []
    for name, fn in CHECKS.items():
        if only is None or name in only:
            out.extend(fn(world))
    return out
