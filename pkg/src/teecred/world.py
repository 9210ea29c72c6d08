"""A simulated world: CA, actors, trust policy, network and audit transcript."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable

from . import crypto
from .actors import (
    BackupAuthority,
    Credential,
    CredentialSet,
    MaintenanceAuthority,
    Node,
    RevocationAuthority,
    RevocationMode,
    ServiceManager,
    TrustedApp,
    make_credential,
)
from .attest import PlatformSnapshot, TrustPolicy, measure
from .pki import CertificateAuthority, Identity, Role
from .simnet.adversary import Adversary, AdversaryProgram, StolenIdentity
from .simnet.network import IDLE, Envelope, NetEvent, Network
from .stcp import StcpSession

NODE_CLASSES = {
    Role.TA: TrustedApp,
    Role.TSM: ServiceManager,
    Role.BA: BackupAuthority,
    Role.RA: RevocationAuthority,
    Role.MA: MaintenanceAuthority,
}


class WorldError(ValueError):
    pass


def honest_snapshot(name: str, role: Role, style: str) -> PlatformSnapshot:
    tag = name.encode()
    if style == "enclave":
        return PlatformSnapshot.build(
            "enclave",
            enclave_loader=b"loader-v2",
            enclave_image=b"image:" + role.value.encode() + b":" + tag,
            enclave_config=b"config:" + tag,
        )
    return PlatformSnapshot.build(
        "gp-tee",
        boot_rom=b"rom-v1",
        trusted_os=b"tos-v3",
        ta_image=b"image:" + role.value.encode() + b":" + tag,
        ta_config=b"config:" + tag,
    )


@dataclass
class SessionPair:
    """Both ends of one handshake, once each side reached Established."""

    initiator: StcpSession | None = None
    responder: StcpSession | None = None


class World:
    def __init__(
        self,
        seed: int = 0,
        revocation_mode: RevocationMode | str = RevocationMode.BLACKLIST,
        ca_name: str = "ca",
    ):
        self.seed = seed
        self.rng = crypto.SeededRandom(seed)
        self.revocation_mode = RevocationMode(revocation_mode)
        self.ca = CertificateAuthority.generate(ca_name, self.rng.fork("ca"))
        self.actors: dict[str, Node] = {}
        self.policy = TrustPolicy()
        self.network = Network()
        self.network.listeners.append(self._on_net_event)
        self.adversary: Adversary | None = None
        self.transcript: list[dict] = []
        self.secrets: dict[str, bytes] = {}
        self.issued: dict[bytes, Credential] = {}
        # ids that reached a TA's sealed store at least once
        self.provisioned: set[bytes] = set()
        self.sessions: dict[bytes, SessionPair] = {}
        self.outcomes: list = []
        self.step_hooks: list[Callable] = []
        self.needs_operator_retry: set[str] = set()
        self.discarded = 0
        self.counters: Counter = Counter()
        self._runs = 0
        self._sealed = False
        self.register_secret("ca/signing", self.ca.keypair.secret.reveal())

    # setup ----------------------------------------------------------------

    def add(
        self,
        name: str,
        role: Role | str,
        style: str | None = None,
        trusted: bool = True,
        tampered: bool = False,
        **options,
    ) -> Node:
        role = Role(role)
        if self._sealed:
            raise WorldError("world setup is finished")
        if name in self.actors or name == self.ca.identity.id:
            raise WorldError(f"duplicate actor id {name!r}")
        if role is Role.CA:
            raise WorldError("the world has exactly one CA")
        if role is Role.RA:
            options.setdefault("mode", self.revocation_mode)
        style = style or ("gp-tee" if role is Role.TA else "enclave")
        honest = honest_snapshot(name, role, style)
        actual = honest
        if tampered:
            comp = "ta-image" if style == "gp-tee" else "enclave-image"
            actual = honest.patched(comp, b"patched:" + name.encode())
        node = NODE_CLASSES[role](
            name, self.ca, self.rng.fork(f"actor:{name}"), honest, reported_snapshot=actual, **options
        )
        node.honest_measurements = measure(honest)
        if trusted:
            self.policy.register(node.identity, measure(honest))
        self.actors[name] = node
        for label, value in node.long_term_secrets().items():
            self.register_secret(label, value)
        if isinstance(node, TrustedApp):
            self.register_secret(f"{name}/srk", node.srk.reveal())
        return node

    def issue(self, ta: TrustedApp | str, names: Iterable[str], issuer: Node | str) -> CredentialSet:
        ta = self.actor(ta)
        issuer = self.actor(issuer)
        if not isinstance(ta, TrustedApp):
            raise WorldError(f"{ta.identity} is not a TA")
        if issuer.identity.role not in (Role.TSM, Role.MA):
            raise WorldError("credentials are issued by a TSM or MA")
        creds = [make_credential(issuer.identity, ta.identity, n, self.rng.fork(f"cred:{ta.identity}:{n}"))
                 for n in names]
        for c in creds:
            self.register_credential(c)
            self.provisioned.add(c.credential_id)
        current = ta.holdings().with_(creds)
        ta.seal(current)
        return current

    def register_credential(self, cred: Credential) -> None:
        self.issued[cred.credential_id] = cred
        self.register_secret(f"credential/{cred.subject}/{cred.name}/v{cred.version}", cred.material)

    def register_secret(self, label: str, value: bytes) -> None:
        self.secrets[label] = bytes(value)

    def arm(self, program: AdversaryProgram | None = None) -> None:
        """Finish setup: enroll credentials with MAs and RA whitelists, arm the adversary."""
        for node in self.actors.values():
            if isinstance(node, MaintenanceAuthority):
                for cred in self.issued.values():
                    node.enroll(cred)
            if isinstance(node, RevocationAuthority) and node.mrl.mode is RevocationMode.WHITELIST:
                node.enroll(self.issued, self.ca.identity)
        program = program or AdversaryProgram()
        stolen = {}
        for name in program.compromise:
            node = self.actor(name)
            stolen[name] = StolenIdentity(node.cert, node.endpoint.attestation, node.honest_measurements)
        self.granted = {f"{n}/attestation" for n in program.compromise}
        self.adversary = Adversary(
            program, crypto.SeededRandom(program.seed if program.seed else self.seed).fork("adversary"),
            self.ca.root, stolen,
        )
        self.network.adversary = self.adversary
        self._sealed = True

    # lookup ---------------------------------------------------------------

    def actor(self, ref: Node | Identity | str) -> Node:
        if isinstance(ref, Node):
            return ref
        key = ref.id if isinstance(ref, Identity) else ref
        try:
            return self.actors[key]
        except KeyError:
            raise WorldError(f"unknown actor {key!r}") from None

    def tas(self) -> list[TrustedApp]:
        return [a for a in self.actors.values() if isinstance(a, TrustedApp)]

    def of_role(self, role: Role) -> list[Node]:
        return [a for a in self.actors.values() if a.identity.role is role]

    @property
    def now(self) -> int:
        return self.network.now

    def next_run(self, kind: str) -> str:
        self._runs += 1
        return f"{kind}#{self._runs}"

    # sessions -------------------------------------------------------------

    def established(self, session: StcpSession) -> None:
        pair = self.sessions.setdefault(session.session_id, SessionPair())
        setattr(pair, session.role, session)
        for name, key in session.keys.items():
            self.register_secret(
                f"session/{session.session_id.hex()}/{session.role}/{name}", key.key.reveal()
            )

    # transcript -----------------------------------------------------------

    def _on_net_event(self, ev: NetEvent) -> None:
        env = ev.envelope
        line = {
            "type": "envelope",
            "seq": env.seq,
            "from": env.src,
            "to": env.dst,
            "kind": env.kind,
            "procedure": env.procedure,
            "step": env.step,
            "label": env.label,
            "body_hex": env.body.hex(),
            "body_hex_digest": env.body_digest,
            "delivered": ev.delivered,
            "at": ev.at,
        }
        if ev.action:
            line["adversary_action"] = ev.action
        if env.injected:
            line["injected"] = True
        self.transcript.append(line)

    def log(self, line: dict) -> None:
        self.transcript.append(line)

    def discard(self, env: Envelope, why: str) -> None:
        self.discarded += 1
        self.log({"type": "discard", "seq": env.seq, "to": env.dst, "reason": why})

    def drain(self) -> None:
        """Deliver whatever is still queued; nobody is listening any more."""
        while True:
            env = self.network.step()
            if env is IDLE:
                return
            self.discard(env, "no active procedure")

    def transcript_jsonl(self) -> str:
        return "".join(json.dumps(line, sort_keys=True) + "\n" for line in self.transcript)
