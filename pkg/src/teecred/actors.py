"""Credential stores and state for the five roles (TA, TSM, BA, RA, MA)."""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from . import crypto
from .attest import PlatformSnapshot, measure
from .pki import Certificate, CertificateAuthority, Identity, KeyUsage, Role
from .simnet.codec import decode, encode, wire
from .stcp import Endpoint, StcpSession

logger = logging.getLogger(__name__)

CERT_VALIDITY = (0, 1 << 40)


class ActorError(Exception):
    """Base class for refusals raised by actor operations."""


class NoCredentials(ActorError):
    pass


class Locked(ActorError):
    pass


class UnknownCredential(ActorError):
    pass


class Unauthorized(ActorError):
    pass


class UnknownBackup(ActorError):
    pass


class UnknownSubject(ActorError):
    pass


class BusyTa(ActorError):
    pass


# ---------------------------------------------------------------------------
# credentials


@wire(30)
@dataclass(frozen=True)
class Credential:
    credential_id: bytes
    issuer: Identity
    subject: Identity
    name: str
    public_part: bytes
    material: bytes
    not_before: int
    not_after: int
    version: int


def credential_id(issuer: Identity, subject: Identity, public_part: bytes, version: int) -> bytes:
    return crypto.digest(b"credential-id" + encode((issuer, subject, public_part, version)))


def make_credential(
    issuer: Identity,
    subject: Identity,
    name: str,
    rng: crypto.SeededRandom,
    version: int = 1,
    validity: tuple[int, int] = CERT_VALIDITY,
) -> Credential:
    # material is an Ed25519 seed; the public part is its verification key
    kp = crypto.generate_signing_keypair(rng)
    material = kp.secret.reveal()
    cid = credential_id(issuer, subject, kp.public, version)
    return Credential(cid, issuer, subject, name, kp.public, material, *validity, version)


@wire(31)
@dataclass(frozen=True)
class CredentialSet:
    items: dict[bytes, Credential] = field(default_factory=dict)

    @classmethod
    def of(cls, creds: Iterable[Credential]) -> CredentialSet:
        items = {}
        for c in creds:
            if c.credential_id in items:
                raise ValueError("duplicate credential id")
            items[c.credential_id] = c
        return cls(items)

    @property
    def ids(self) -> frozenset[bytes]:
        return frozenset(self.items)

    def without(self, ids: Iterable[bytes]) -> CredentialSet:
        drop = set(ids)
        return CredentialSet({k: v for k, v in self.items.items() if k not in drop})

    def with_(self, creds: Iterable[Credential]) -> CredentialSet:
        items = dict(self.items)
        items.update((c.credential_id, c) for c in creds)
        return CredentialSet(items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Credential]:
        return iter(self.items.values())

    def __contains__(self, cid: object) -> bool:
        return cid in self.items


@wire(32)
@dataclass(frozen=True)
class SealedBlob:
    ciphertext: bytes
    nonce: bytes
    aad: bytes
    srk_id: Identity


# ---------------------------------------------------------------------------
# nodes


class Node:
    """A networked party: identity, attestation and command keys, certificates."""

    role: Role

    def __init__(
        self,
        name: str,
        ca: CertificateAuthority,
        rng: crypto.SeededRandom,
        snapshot: PlatformSnapshot,
        reported_snapshot: PlatformSnapshot | None = None,
    ):
        self.identity = Identity(name, self.role)
        self.rng = rng
        self.snapshot = snapshot
        attestation = crypto.generate_signing_keypair(rng)
        self.command = crypto.generate_signing_keypair(rng)
        cert = ca.issue(self.identity, attestation.public, CERT_VALIDITY, KeyUsage.ATTESTATION)
        self.command_cert = ca.issue(
            self.identity, self.command.public, CERT_VALIDITY, KeyUsage.COMMAND
        )
        # the trusted measurer reports what is actually loaded
        self.endpoint = Endpoint(
            identity=self.identity,
            attestation=attestation,
            cert=cert,
            measurements=measure(reported_snapshot or snapshot),
            root=ca.root,
            cookie_secret=crypto.Secret(rng.bytes(32)),
        )
        self.sessions: dict[bytes, StcpSession] = {}
        self.log: list[str] = []

    @property
    def cert(self) -> Certificate:
        return self.endpoint.cert

    @property
    def counters(self) -> Counter:
        return self.endpoint.counters

    def long_term_secrets(self) -> dict[str, bytes]:
        return {
            f"{self.identity}/attestation": self.endpoint.attestation.secret.reveal(),
            f"{self.identity}/command": self.command.secret.reveal(),
            f"{self.identity}/cookie": self.endpoint.cookie_secret.reveal(),
        }

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.identity.id!r})"


class TrustedApp(Node):
    role = Role.TA

    def __init__(self, *args, malicious: bool = False, **kwargs):
        super().__init__(*args, **kwargs)
        self.srk = crypto.Secret(self.rng.bytes(crypto.KEY_LEN))
        self.sealed: SealedBlob | None = None
        self.set_version = 0
        self.locked = False
        self.busy = False
        self.malicious = malicious
        # plaintext set, populated only while a procedure step needs it
        self.working: CredentialSet | None = None

    # sealing -------------------------------------------------------------

    def _sealing_key(self) -> crypto.SymmetricKey:
        raw = crypto.kdf(self.srk, b"", b"seal" + encode(self.identity), crypto.KEY_LEN)
        return crypto.SymmetricKey(crypto.Secret(raw), crypto.KeyPurpose.SEALING)

    def backup_key(self) -> crypto.SymmetricKey:
        raw = crypto.kdf(self.srk, b"", b"backup" + encode(self.identity), crypto.KEY_LEN)
        return crypto.SymmetricKey(crypto.Secret(raw), crypto.KeyPurpose.BACKUP)

    def _binding(self, version: int) -> bytes:
        return crypto.digest(b"sealed-binding" + encode((self.identity, version)))

    def seal(self, creds: CredentialSet) -> SealedBlob:
        self.set_version += 1
        nonce = self.rng.bytes(crypto.AEAD_NONCE_LEN)
        aad = self._binding(self.set_version)
        ct = crypto.aead_seal(self._sealing_key(), nonce, aad, encode(creds))
        self.sealed = SealedBlob(ct, nonce, aad, self.identity)
        return self.sealed

    def unseal(self) -> CredentialSet:
        blob = self.sealed
        if blob is None:
            raise NoCredentials(f"{self.identity} has no sealed credentials")
        if blob.aad != self._binding(self.set_version) or blob.srk_id != self.identity:
            raise crypto.AeadAuthFail("sealed blob is bound to another TA or version")
        plaintext = crypto.aead_open(self._sealing_key(), blob.nonce, blob.aad, blob.ciphertext)
        return decode(plaintext, CredentialSet)

    def holdings(self) -> CredentialSet:
        """Sealed set, or empty if nothing is sealed."""
        if self.sealed is None:
            return CredentialSet()
        return self.unseal()

    def delete(self, ids: Iterable[bytes]) -> CredentialSet:
        remaining = self.holdings().without(ids)
        self.seal(remaining)
        return remaining

    def wipe(self) -> None:
        """Lose all sealed storage (device reset); the SRK survives."""
        self.sealed = None
        self.working = None

    # REE interface --------------------------------------------------------

    def lock(self) -> None:
        if self.locked:
            self.log.append("lock: already locked")
            logger.info("%s re-locked while locked", self.identity)
        self.locked = True

    def unlock(self) -> None:
        if not self.locked:
            self.log.append("unlock: not locked")
            logger.info("%s unlock while not locked", self.identity)
        self.locked = False

    def use_credential(self, cid: bytes, challenge: bytes = b"") -> bytes:
        """Serve an REE request: sign ``challenge`` with the credential's key."""
        if self.locked:
            raise Locked(f"{self.identity} is locked")
        try:
            cred = self.holdings().items[cid]
        except KeyError:
            raise UnknownCredential(cid.hex()) from None
        return crypto.sign(cred.material, b"credential-use" + cid + challenge)


class ServiceManager(Node):
    role = Role.TSM

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.backups: dict[Identity, tuple[Identity, bytes]] = {}
        self.revealed: dict[Identity, frozenset[bytes]] = {}


# ---------------------------------------------------------------------------
# revocation authority


class RevocationMode(enum.Enum):
    BLACKLIST = "blacklist"
    WHITELIST = "whitelist"


@wire(33)
@dataclass(frozen=True)
class ListEntry:
    registered_by: Identity
    at: int


@wire(34)
@dataclass(frozen=True)
class JournalOp:
    op: str
    credential_id: bytes
    by: Identity
    at: int


class Journal:
    """Append-only file, one hex-encoded canonical entry per line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, entry) -> None:
        with self.path.open("a") as fh:
            fh.write(encode(entry).hex() + "\n")

    def replay(self) -> Iterator:
        if not self.path.exists():
            return
        with self.path.open() as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield decode(bytes.fromhex(line))


class RevocationList:
    """Master revocation list.  Membership is one dict lookup per id."""

    def __init__(self, mode: RevocationMode):
        self.mode = mode
        self.entries: dict[bytes, ListEntry] = {}

    def add(self, cid: bytes, by: Identity, at: int) -> bool:
        if cid in self.entries:
            return False
        self.entries[cid] = ListEntry(by, at)
        return True

    def remove(self, cid: bytes) -> bool:
        return self.entries.pop(cid, None) is not None

    def is_revoked(self, cid: bytes) -> bool:
        if self.mode is RevocationMode.BLACKLIST:
            return cid in self.entries
        return cid not in self.entries

    def lookup(self, ids: Iterable[bytes]) -> frozenset[bytes]:
        return frozenset(cid for cid in ids if self.is_revoked(cid))


@wire(35)
@dataclass(frozen=True)
class Report:
    report_id: bytes
    ta_identity: Identity
    revoked_credential_id: bytes
    at: int


class RevocationAuthority(Node):
    role = Role.RA

    def __init__(self, *args, mode: RevocationMode = RevocationMode.BLACKLIST,
                 journal: str | Path | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.mrl = RevocationList(mode)
        self.journal = Journal(journal) if journal else None
        self.pending_reports: list[Report] = []
        self.sent_reports: list[Report] = []
        if self.journal:
            for op in self.journal.replay():
                self._apply(op)

    def _apply(self, op: JournalOp) -> None:
        if op.op == "add":
            self.mrl.add(op.credential_id, op.by, op.at)
        elif op.op == "remove":
            self.mrl.remove(op.credential_id)

    def _record(self, op: str, cid: bytes, by: Identity, at: int) -> None:
        entry = JournalOp(op, cid, by, at)
        self._apply(entry)
        if self.journal:
            self.journal.append(entry)

    def enroll(self, ids: Iterable[bytes], by: Identity, at: int = 0) -> None:
        """Seed a whitelist with permitted ids (world setup only)."""
        for cid in ids:
            self._record("add", cid, by, at)


def ra_register(
    ra: RevocationAuthority,
    ids: Iterable[bytes],
    by: Identity,
    at: int = 0,
    replacements: Iterable[bytes] = (),
) -> int:
    """Revoke ``ids`` on behalf of an MA; returns how many became revoked."""
    if by.role is not Role.MA:
        raise Unauthorized(f"{by} may not register revocations")
    added = 0
    for cid in ids:
        if ra.mrl.is_revoked(cid):
            continue
        if ra.mrl.mode is RevocationMode.BLACKLIST:
            ra._record("add", cid, by, at)
        else:
            ra._record("remove", cid, by, at)
        added += 1
    if ra.mrl.mode is RevocationMode.WHITELIST:
        for cid in replacements:
            if cid not in ra.mrl.entries:
                ra._record("add", cid, by, at)
    return added


def ra_lookup(ra: RevocationAuthority, ids: Iterable[bytes], caller: Identity) -> frozenset[bytes]:
    if caller.role not in (Role.TSM, Role.MA):
        raise Unauthorized(f"{caller} may not query the revocation list")
    return ra.mrl.lookup(ids)


def ra_check_use(ra: RevocationAuthority, ta: Identity, cid: bytes, at: int) -> bool:
    """Relying-party check of a credential use; queues a report if revoked."""
    if not ra.mrl.is_revoked(cid):
        return True
    ra_report_attempt(ra, ta, cid, at)
    return False


def ra_report_attempt(ra: RevocationAuthority, ta: Identity, cid: bytes, at: int) -> Report:
    if not ra.mrl.is_revoked(cid):
        raise ValueError("only revoked credentials are reported")
    report_id = crypto.digest(
        b"report" + encode((ta, cid, at, len(ra.pending_reports) + len(ra.sent_reports)))
    )[:16]
    report = Report(report_id, ta, cid, at)
    ra.pending_reports.append(report)
    return report


# ---------------------------------------------------------------------------
# backup authority


@wire(36)
@dataclass(frozen=True)
class BackupEntry:
    payload: bytes
    at: int


@wire(37)
@dataclass(frozen=True)
class BackupJournalEntry:
    ta: Identity
    backup_id: bytes
    payload: bytes
    at: int


class BackupAuthority(Node):
    role = Role.BA

    def __init__(self, *args, journal: str | Path | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.store: dict[tuple[Identity, bytes], BackupEntry] = {}
        self.journal = Journal(journal) if journal else None
        self.available = True
        if self.journal:
            for e in self.journal.replay():
                self.store[(e.ta, e.backup_id)] = BackupEntry(e.payload, e.at)


def ba_store(ba: BackupAuthority, ta: Identity, payload: bytes, caller: Identity, at: int = 0) -> bytes:
    if caller != ta:
        raise Unauthorized(f"{caller} may not store backups for {ta}")
    backup_id = crypto.digest(b"backup-id" + encode((ta, payload, at, len(ba.store))))[:16]
    ba.store[(ta, backup_id)] = BackupEntry(bytes(payload), at)
    if ba.journal:
        ba.journal.append(BackupJournalEntry(ta, backup_id, bytes(payload), at))
    return backup_id


def ba_fetch(ba: BackupAuthority, ta: Identity, backup_id: bytes, caller: Identity) -> bytes:
    if caller != ta and caller.role is not Role.MA:
        raise Unauthorized(f"{caller} may not fetch backups of {ta}")
    try:
        return ba.store[(ta, backup_id)].payload
    except KeyError:
        raise UnknownBackup(backup_id.hex()) from None


# ---------------------------------------------------------------------------
# maintenance authority


@dataclass(frozen=True)
class ReportLogEntry:
    ta_identity: Identity
    revoked_credential_id: bytes
    at: int


class MaintenanceAuthority(Node):
    role = Role.MA

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        # public metadata of credentials this MA can rotate:
        # id -> (subject, name, version, verification key)
        self.catalog: dict[bytes, tuple[Identity, str, int, bytes]] = {}
        self.subjects: set[Identity] = set()
        self.superseded: dict[bytes, bytes] = {}
        self.report_log: list[ReportLogEntry] = []
        self._seen_reports: set[bytes] = set()

    def enroll(self, cred: Credential) -> None:
        self.subjects.add(cred.subject)
        self.catalog[cred.credential_id] = (cred.subject, cred.name, cred.version, cred.public_part)


def possession_proof(cred: Credential, challenge: bytes) -> bytes:
    return crypto.sign(cred.material, b"credential-possession" + cred.credential_id + challenge)


def ma_issue_update(
    ma: MaintenanceAuthority,
    old: bytes,
    subject: Identity,
    proof: bytes | None = None,
    challenge: bytes = b"",
) -> Credential:
    """Issue the successor of ``old`` to ``subject``.

    A TA other than the original subject (it received the credential by
    migration) must prove possession of the old key over ``challenge``.
    """
    if subject.role is not Role.TA:
        raise UnknownSubject(str(subject))
    try:
        known_subject, name, version, public = ma.catalog[old]
    except KeyError:
        raise UnknownCredential(old.hex()) from None
    if known_subject != subject:
        msg = b"credential-possession" + old + challenge
        if proof is None or not crypto.verify(public, msg, proof):
            raise UnknownSubject(f"{old.hex()[:12]} does not belong to {subject}")
    new = make_credential(ma.identity, subject, name, ma.rng, version=version + 1)
    ma.subjects.add(subject)
    ma.catalog[new.credential_id] = (subject, name, new.version, new.public_part)
    ma.superseded[old] = new.credential_id
    return new


def ma_receive_report(ma: MaintenanceAuthority, report: Report) -> bytes:
    """Append the report to the log (retransmissions are acknowledged once)."""
    if report.report_id not in ma._seen_reports:
        ma._seen_reports.add(report.report_id)
        ma.report_log.append(
            ReportLogEntry(report.ta_identity, report.revoked_credential_id, report.at)
        )
    return report.report_id
