"""Single-level PKI: one CA certifies every actor's keys.

Validity windows are in logical simulation ticks, never wall-clock time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from . import crypto
from .simnet.codec import encode, wire


@wire(1)
class Role(enum.Enum):
    TA = "TA"
    TSM = "TSM"
    BA = "BA"
    RA = "RA"
    MA = "MA"
    CA = "CA"


@wire(2)
@dataclass(frozen=True)
class Identity:
    id: str
    role: Role

    def __str__(self) -> str:
        return self.id


@wire(3)
class KeyUsage(enum.Enum):
    ATTESTATION = "attestation"
    COMMAND = "command"


@wire(4)
@dataclass(frozen=True)
class Certificate:
    subject: Identity
    public_key: bytes
    issuer: Identity
    not_before: int
    not_after: int
    usage: KeyUsage
    signature: bytes = b""

    def tbs(self) -> bytes:
        """Canonical encoding of every field except the signature."""
        return encode(replace(self, signature=b""))

    @property
    def fingerprint(self) -> bytes:
        return crypto.digest(encode(self))


class CertStatus(enum.Enum):
    ACCEPT = "Accept"
    BAD_SIGNATURE = "BadSignature"
    EXPIRED = "Expired"
    UNKNOWN_ISSUER = "UnknownIssuer"

    def __bool__(self) -> bool:
        return self is CertStatus.ACCEPT


class PkiError(ValueError):
    pass


@dataclass(frozen=True)
class RootOfTrust:
    identity: Identity
    public_key: bytes


class CertificateAuthority:
    def __init__(self, identity: Identity, keypair: crypto.SigningKeyPair):
        if identity.role is not Role.CA:
            raise PkiError("CA identity must carry role CA")
        self.identity = identity
        self.keypair = keypair
        self.issued: list[Certificate] = []

    @classmethod
    def generate(cls, name: str, rng: crypto.SeededRandom) -> CertificateAuthority:
        return cls(Identity(name, Role.CA), crypto.generate_signing_keypair(rng))

    @property
    def root(self) -> RootOfTrust:
        return RootOfTrust(self.identity, self.keypair.public)

    def issue(
        self,
        subject: Identity,
        public_key: bytes,
        validity: tuple[int, int],
        usage: KeyUsage = KeyUsage.ATTESTATION,
    ) -> Certificate:
        return issue_certificate(self, subject, public_key, validity, usage)


def issue_certificate(
    ca: CertificateAuthority,
    subject: Identity,
    public_key: bytes,
    validity: tuple[int, int],
    usage: KeyUsage = KeyUsage.ATTESTATION,
) -> Certificate:
    not_before, not_after = validity
    if not_after < not_before:
        raise PkiError(f"inverted validity window {validity}")
    unsigned = Certificate(subject, bytes(public_key), ca.identity, not_before, not_after, usage)
    cert = replace(unsigned, signature=crypto.sign(ca.keypair.secret, unsigned.tbs()))
    ca.issued.append(cert)
    return cert


def verify_certificate(cert: Certificate, root: RootOfTrust, now: int) -> CertStatus:
    if cert.issuer != root.identity or cert.issuer.role is not Role.CA:
        return CertStatus.UNKNOWN_ISSUER
    if not crypto.verify(root.public_key, cert.tbs(), cert.signature):
        return CertStatus.BAD_SIGNATURE
    if not cert.not_before <= now <= cert.not_after:
        return CertStatus.EXPIRED
    return CertStatus.ACCEPT
