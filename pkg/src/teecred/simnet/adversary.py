"""Programmable Dolev-Yao adversary.

The adversary sees every envelope, and can drop, delay, replay, tamper with
or inject messages.  It holds no key material unless a scenario grants it a
long-term attestation key, in which case an ``impersonate`` rule lets it
answer handshakes addressed to that identity and read whatever the victim
then sends.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

from .. import crypto, stcp
from ..attest import MeasurementVector, TrustPolicy
from ..pki import Certificate, RootOfTrust
from .codec import DecodeError, decode, encode
from .network import HANDSHAKE, RECORD, Envelope, Network

ACTIONS = ("drop", "delay", "replay", "replay_history", "tamper", "inject", "observe", "impersonate")
TAMPER_MODES = ("flip", "truncate", "extend", "splice", "duplicate")
MATCH_KEYS = ("seq", "src", "dst", "kind", "procedure", "step", "label", "injected")


class AdversaryError(ValueError):
    pass


@dataclass(frozen=True)
class Rule:
    match: dict[str, Any]
    action: str
    params: dict[str, Any] = field(default_factory=dict)
    limit: int = 1  # 0 = unlimited

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise AdversaryError(f"unknown adversary action {self.action!r}")
        unknown = set(self.match) - set(MATCH_KEYS)
        if unknown:
            raise AdversaryError(f"unknown match keys {sorted(unknown)}")

    def matches(self, env: Envelope) -> bool:
        m = self.match
        if env.injected and not m.get("injected", False):
            return False
        for key in ("seq", "src", "dst", "kind", "procedure", "step"):
            if key in m and getattr(env, key) != m[key]:
                return False
        if "label" in m and m["label"] not in env.label:
            return False
        return True

    def to_json(self) -> dict:
        return {"match": dict(self.match), "action": self.action,
                "params": dict(self.params), "limit": self.limit}

    @classmethod
    def from_json(cls, data: dict) -> Rule:
        return cls(dict(data.get("match", {})), data["action"],
                   dict(data.get("params", {})), int(data.get("limit", 1)))


@dataclass(frozen=True)
class AdversaryProgram:
    rules: tuple[Rule, ...] = ()
    seed: int = 0
    compromise: tuple[str, ...] = ()

    def with_rules(self, rules) -> AdversaryProgram:
        return replace(self, rules=tuple(rules))

    def to_json(self) -> dict:
        return {"seed": self.seed, "compromise": list(self.compromise),
                "rules": [r.to_json() for r in self.rules]}


@dataclass(frozen=True)
class StolenIdentity:
    """What a compromise grant gives the adversary for one identity."""

    cert: Certificate
    attestation: crypto.SigningKeyPair
    measurements: MeasurementVector


@dataclass
class Verdict:
    envelope: Envelope | None
    action: str | None = None
    reschedule: int | None = None


class _Anything(frozenset):
    def __contains__(self, item) -> bool:
        return True


class _TrustEverything(dict):
    def get(self, key, default=None):
        return _Anything()


@dataclass
class _Hijack:
    victim: str
    initiator: str
    pending: stcp.ResponderPending | None
    session: stcp.StcpSession | None = None


class Adversary:
    def __init__(
        self,
        program: AdversaryProgram,
        rng: crypto.SeededRandom,
        root: RootOfTrust,
        stolen: dict[str, StolenIdentity] | None = None,
    ):
        self.program = program
        self.rng = rng
        self.root = root
        self.stolen = stolen or {}
        self.fired = [0] * len(program.rules)
        self.history: list[Envelope] = []
        # everything observed on the wire plus anything decrypted
        self.knowledge: list[bytes] = []
        self.decrypted: list[bytes] = []
        self.actions: list[tuple[int, str]] = []
        self.hijacks: dict[bytes, _Hijack] = {}
        self._gullible = TrustPolicy(expected=_TrustEverything())

    # ------------------------------------------------------------------

    def process(self, env: Envelope, net: Network) -> Verdict:
        self.history.append(env)
        self.knowledge.append(env.body)
        hijacked = self._continue_hijack(env, net)
        if hijacked is not None:
            self.actions.append((env.seq, hijacked.action))
            return hijacked
        for i, rule in enumerate(self.program.rules):
            if rule.limit and self.fired[i] >= rule.limit:
                continue
            if not rule.matches(env):
                continue
            verdict = self._apply(rule, env, net)
            if verdict is None:
                continue
            self.fired[i] += 1
            self.actions.append((env.seq, verdict.action or rule.action))
            return verdict
        return Verdict(env)

    def _apply(self, rule: Rule, env: Envelope, net: Network) -> Verdict | None:
        p = rule.params
        action = rule.action
        if action == "drop":
            return Verdict(None, "drop")
        if action == "observe":
            return Verdict(env, "observe")
        if action == "delay":
            return Verdict(env, f"delay({int(p.get('n', 3))})", reschedule=int(p.get("n", 3)))
        if action == "replay":
            net.inject(env, delay=int(p.get("after", 0)))
            return Verdict(env, "replay")
        if action == "replay_history":
            older = [h for h in self.history[:-1] if h.seq != env.seq]
            if not older:
                return None
            pick = self.rng.choice(older)
            net.inject(pick)
            return Verdict(env, f"replay_history({pick.seq})")
        if action == "tamper":
            mode = p.get("mode") or self.rng.choice(TAMPER_MODES)
            body = self._mutate(env.body, mode)
            return Verdict(replace(env, body=body), f"tamper({mode})")
        if action == "inject":
            net.inject(self._crafted(env, p))
            return Verdict(env, "inject")
        if action == "impersonate":
            return self._start_hijack(env, net, p.get("identity", env.dst))
        raise AdversaryError(action)

    def _mutate(self, body: bytes, mode: str) -> bytes:
        b = bytearray(body)
        if not b:
            return bytes(self.rng.bytes(1))
        if mode == "flip":
            pos = self.rng.randrange(len(b) * 8)
            b[pos // 8] ^= 1 << (pos % 8)
        elif mode == "truncate":
            del b[self.rng.randrange(len(b)):]
        elif mode == "extend":
            b += self.rng.bytes(1 + self.rng.randrange(8))
        elif mode == "duplicate":
            i = self.rng.randrange(len(b))
            j = min(len(b), i + 1 + self.rng.randrange(16))
            b[j:j] = b[i:j]
        elif mode == "splice":
            donors = [k for k in self.knowledge[:-1] if k and k != body]
            if not donors:
                return self._mutate(body, "flip")
            donor = self.rng.choice(donors)
            i = self.rng.randrange(len(b))
            n = 1 + self.rng.randrange(min(32, len(donor)))
            k = self.rng.randrange(len(donor) - n + 1)
            b[i : i + n] = donor[k : k + n]
            if bytes(b) == body:
                return self._mutate(body, "flip")
        else:
            raise AdversaryError(f"unknown tamper mode {mode!r}")
        return bytes(b)

    def _crafted(self, env: Envelope, p: dict) -> Envelope:
        if "body_hex" in p:
            body = bytes.fromhex(p["body_hex"])
        else:
            body = self.rng.bytes(int(p.get("junk", 32)))
        return replace(
            env,
            src=p.get("src", env.src),
            dst=p.get("dst", env.dst),
            kind=p.get("kind", env.kind),
            body=body,
        )

    # ------------------------------------------------------------------
    # impersonation

    def _forged_identity(self, victim_cert: Certificate) -> StolenIdentity:
        """Self-made key and certificate claiming the victim's identity."""
        kp = crypto.generate_signing_keypair(self.rng)
        unsigned = replace(victim_cert, public_key=kp.public, signature=b"")
        cert = replace(unsigned, signature=crypto.sign(kp.secret, unsigned.tbs()))
        fake_mv = MeasurementVector((crypto.digest(b"adversary"),))
        return StolenIdentity(cert, kp, fake_mv)

    def _start_hijack(self, env: Envelope, net: Network, victim: str) -> Verdict | None:
        if env.kind != HANDSHAKE or env.dst != victim:
            return None
        try:
            m1 = decode(env.body, stcp.M1)
        except DecodeError:
            return None
        stolen = self.stolen.get(victim)
        if stolen is None:
            victim_cert = self._observed_cert(victim)
            if victim_cert is None:
                return None
            stolen = self._forged_identity(victim_cert)
        endpoint = stcp.Endpoint(
            identity=stolen.cert.subject,
            attestation=stolen.attestation,
            cert=stolen.cert,
            measurements=stolen.measurements,
            root=self.root,
            cookie_secret=crypto.Secret(b"\x00" * 32),
        )
        m1c = replace(m1, cookie=stcp.make_cookie(endpoint, m1, env.src, net.now // stcp.COOKIE_WINDOW))
        try:
            pending, m2 = stcp.respond(endpoint, m1c, self._gullible, self.rng, env.src, net.now)
        except stcp.StcpRejected:
            return None
        self.hijacks[m1.session_id] = _Hijack(victim, env.src, pending)
        net.inject(replace(env, src=victim, dst=env.src, body=encode(m2)))
        return Verdict(None, f"impersonate({victim})")

    def _observed_cert(self, victim: str) -> Certificate | None:
        for h in self.history:
            if h.kind != HANDSHAKE:
                continue
            try:
                msg = decode(h.body)
            except DecodeError:
                continue
            cert = getattr(msg, "initiator_cert", None) or getattr(msg, "responder_cert", None)
            if cert is not None and cert.subject.id == victim:
                return cert
        return None

    def _continue_hijack(self, env: Envelope, net: Network) -> Verdict | None:
        if not self.hijacks or env.injected:
            return None
        try:
            msg = decode(env.body)
        except DecodeError:
            return None
        sid = getattr(msg, "session_id", None)
        hijack = self.hijacks.get(sid) if isinstance(sid, bytes) else None
        if hijack is None or env.dst != hijack.victim:
            return None
        if isinstance(msg, stcp.M3) and hijack.pending is not None:
            try:
                hijack.session = stcp.finalize(hijack.pending, msg, self._gullible)
            except stcp.StcpRejected:
                pass
            hijack.pending = None
            return Verdict(None, "hijack(m3)")
        if isinstance(msg, stcp.Record) and env.kind == RECORD and hijack.session is not None:
            try:
                plaintext = stcp.recv_record(hijack.session, msg)
            except stcp.StcpRejected:
                return Verdict(None, "hijack(record-rejected)")
            self.decrypted.append(plaintext)
            self.knowledge.append(plaintext)
            return Verdict(None, "hijack(record)")
        return None
