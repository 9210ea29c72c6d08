"""Secure and Trusted Channel Protocol.

Three-message, signed-ephemeral handshake in which both quotes are bound to
the running transcript hash, preceded by a stateless cookie round trip::

    I -> R   M1   {sid, cert_i, nonce_i, eph_i}
    R -> I   CookieChallenge {sid, cookie}          (no state kept at R)
    I -> R   M1   {sid, cert_i, nonce_i, eph_i, cookie}
    R -> I   M2   {sid, cert_r, nonce_r, eph_r, quote_r, sig_r}
    I -> R   M3   {sid, quote_i, sig_i, confirm_mac}

``quote_r`` answers ``nonce_i`` and binds the transcript through M2's key
share; ``quote_i`` answers ``nonce_r`` and binds the transcript through
``sig_r``.  Four directional keys (enc/mac for each direction) come from
HKDF over the X25519 secret, salted with both nonces.

Handshake functions consume their pending state: a pending object can be
advanced once, and is wiped on rejection.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field, replace

from . import crypto
from .attest import MeasurementVector, Quote, QuoteStatus, TrustPolicy, generate_quote, verify_quote
from .pki import Certificate, Identity, KeyUsage, RootOfTrust, verify_certificate
from .simnet.codec import encode, wire

COOKIE_LEN = 16
COOKIE_WINDOW = 1 << 16
SESSION_ID_LEN = 16
_DIRECTIONS = ("i2r", "r2i")


class Reason(enum.Enum):
    BAD_CERT = "BadCert"
    BAD_SIGNATURE = "BadSignature"
    QUOTE_REJECTED = "QuoteRejected"
    BAD_CONFIRM_MAC = "BadConfirmMac"
    INVALID_PEER_KEY = "InvalidPeerKey"
    REPLAY_OR_REORDER = "ReplayOrReorder"
    AEAD_AUTH_FAIL = "AeadAuthFail"
    WRONG_SESSION = "WrongSession"
    STATE = "InvalidState"


class StcpRejected(Exception):
    def __init__(self, reason: Reason, detail: str = "", quote_status: QuoteStatus | None = None):
        self.reason = reason
        self.quote_status = quote_status
        label = reason.value
        if quote_status is not None:
            label = f"{label}({quote_status.value})"
        self.label = label
        super().__init__(f"{label}: {detail}" if detail else label)


class HandshakeRejected(StcpRejected):
    pass


class RecordRejected(StcpRejected):
    pass


class State(enum.Enum):
    AWAIT_M2 = "AwaitM2"
    AWAIT_M3 = "AwaitM3"
    ESTABLISHED = "Established"
    FAILED = "Failed"
    CLOSED = "Closed"


@wire(20)
@dataclass(frozen=True)
class M1:
    session_id: bytes
    initiator_cert: Certificate
    nonce_i: bytes
    ephemeral_pub_i: bytes
    cookie: bytes | None = None


@wire(21)
@dataclass(frozen=True)
class CookieChallenge:
    session_id: bytes
    cookie: bytes


@wire(22)
@dataclass(frozen=True)
class M2:
    session_id: bytes
    responder_cert: Certificate
    nonce_r: bytes
    ephemeral_pub_r: bytes
    quote_r: Quote
    sig_r: bytes


@wire(23)
@dataclass(frozen=True)
class M3:
    session_id: bytes
    quote_i: Quote
    sig_i: bytes
    confirm_mac: bytes


@wire(24)
@dataclass(frozen=True)
class Record:
    session_id: bytes
    sequence: int
    ciphertext: bytes


HANDSHAKE_TYPES = (M1, CookieChallenge, M2, M3)


@dataclass
class Endpoint:
    """Long-term material one party brings to a handshake."""

    identity: Identity
    attestation: crypto.SigningKeyPair
    cert: Certificate
    measurements: MeasurementVector
    root: RootOfTrust
    cookie_secret: crypto.Secret
    counters: Counter = field(default_factory=Counter)
    # session ids of cookie-validated M1s, so a replayed M1 is refused
    seen_sessions: set = field(default_factory=set)


@dataclass
class InitiatorPending:
    endpoint: Endpoint
    peer: Identity
    session_id: bytes
    nonce_i: bytes
    ephemeral: crypto.EphemeralKeyPair
    m1: M1
    pinned_fingerprint: bytes | None = None
    state: State = State.AWAIT_M2


@dataclass
class ResponderPending:
    endpoint: Endpoint
    m1: M1
    peer_cert: Certificate
    nonce_r: bytes
    ephemeral: crypto.EphemeralKeyPair
    m2: M2
    transcript: bytes
    state: State = State.AWAIT_M3


@dataclass
class StcpSession:
    session_id: bytes
    role: str
    local: Identity
    peer: Identity
    peer_cert: Certificate
    keys: dict[str, crypto.SymmetricKey] = field(repr=False)
    transcript_hash: bytes
    peer_quote: QuoteStatus
    send_counter: int = 0
    recv_counter: int = 0
    state: State = State.ESTABLISHED

    @property
    def _out(self) -> str:
        return "i2r" if self.role == "initiator" else "r2i"

    @property
    def _in(self) -> str:
        return "r2i" if self.role == "initiator" else "i2r"

    def close(self) -> None:
        for key in self.keys.values():
            key.key.zeroize()
        self.state = State.CLOSED


def _th(label: bytes, *parts) -> bytes:
    return crypto.digest(label + encode(parts))


def _transcript_m2(m1: M1, cert_r: Certificate, nonce_r: bytes, eph_r: bytes) -> bytes:
    th1 = _th(b"stcp/m1", replace(m1, cookie=None))
    return _th(b"stcp/m2", th1, cert_r, nonce_r, eph_r)


def _transcript_m3(th2: bytes, quote_r: Quote, sig_r: bytes) -> bytes:
    return _th(b"stcp/m2-auth", th2, quote_r, sig_r)


def _transcript_final(th3: bytes, quote_i: Quote, sig_i: bytes) -> bytes:
    return _th(b"stcp/m3-auth", th3, quote_i, sig_i)


def wire_transcript_hash(m1: M1, m2: M2, m3: M3) -> bytes:
    """Final transcript hash, recomputed from the three public messages."""
    th2 = _transcript_m2(m1, m2.responder_cert, m2.nonce_r, m2.ephemeral_pub_r)
    th3 = _transcript_m3(th2, m2.quote_r, m2.sig_r)
    return _transcript_final(th3, m3.quote_i, m3.sig_i)


def derive_session_keys(
    dh_secret: bytes, nonce_i: bytes, nonce_r: bytes, transcript_hash: bytes
) -> dict[str, crypto.SymmetricKey]:
    keys = {}
    for direction in _DIRECTIONS:
        okm = crypto.kdf(
            dh_secret, nonce_i + nonce_r, transcript_hash + direction.encode(), 2 * crypto.KEY_LEN
        )
        keys[f"enc_{direction}"] = crypto.SymmetricKey(
            crypto.Secret(okm[: crypto.KEY_LEN]), crypto.KeyPurpose.SESSION_ENCRYPT
        )
        keys[f"mac_{direction}"] = crypto.SymmetricKey(
            crypto.Secret(okm[crypto.KEY_LEN :]), crypto.KeyPurpose.SESSION_MAC
        )
    return keys


def confirm_tag(mac_key: crypto.SymmetricKey | bytes, transcript_hash: bytes) -> bytes:
    return crypto.mac(mac_key, b"stcp/confirm" + transcript_hash)


def _check_cert(ep: Endpoint, cert: Certificate, now: int) -> None:
    status = verify_certificate(cert, ep.root, now)
    if not status:
        raise HandshakeRejected(Reason.BAD_CERT, status.value)
    if cert.usage is not KeyUsage.ATTESTATION:
        raise HandshakeRejected(Reason.BAD_CERT, "certificate is not an attestation certificate")


def _check_quote(
    quote: Quote, cert: Certificate, policy: TrustPolicy, nonce: bytes, binding: bytes
) -> QuoteStatus:
    if quote.tee_identity != cert.subject:
        status = QuoteStatus.UNKNOWN_PLATFORM
    else:
        status = verify_quote(quote, policy, nonce, binding, cert.public_key)
    if not status:
        raise HandshakeRejected(Reason.QUOTE_REJECTED, quote_status=status)
    return status


def initiate(
    ep: Endpoint,
    peer: Identity,
    rng: crypto.SeededRandom,
    pinned_fingerprint: bytes | None = None,
) -> tuple[InitiatorPending, M1]:
    session_id = rng.bytes(SESSION_ID_LEN)
    nonce_i = rng.bytes(crypto.HANDSHAKE_NONCE_LEN)
    eph = crypto.generate_ephemeral_keypair(rng)
    ep.counters["ephemerals_generated"] += 1
    m1 = M1(session_id, ep.cert, nonce_i, eph.public)
    return InitiatorPending(ep, peer, session_id, nonce_i, eph, m1, pinned_fingerprint), m1


def answer_cookie(pending: InitiatorPending, challenge: CookieChallenge) -> M1:
    """Repeat M1 carrying the responder's cookie."""
    if pending.state is not State.AWAIT_M2 or pending.m1.cookie is not None:
        raise HandshakeRejected(Reason.STATE, "unexpected cookie challenge")
    if challenge.session_id != pending.session_id:
        raise HandshakeRejected(Reason.WRONG_SESSION, "cookie for another session")
    pending.m1 = replace(pending.m1, cookie=bytes(challenge.cookie))
    return pending.m1


def make_cookie(ep: Endpoint, m1: M1, address: str, epoch: int) -> bytes:
    material = encode((address, epoch, _th(b"stcp/m1", replace(m1, cookie=None))))
    return crypto.mac(ep.cookie_secret, b"stcp/cookie" + material)[:COOKIE_LEN]


def _cookie_valid(ep: Endpoint, m1: M1, address: str, now: int) -> bool:
    if m1.cookie is None or len(m1.cookie) != COOKIE_LEN:
        return False
    epoch = now // COOKIE_WINDOW
    return any(
        crypto.mac_equal(m1.cookie, make_cookie(ep, m1, address, e))
        for e in (epoch, epoch - 1)
        if e >= 0
    )


def respond(
    ep: Endpoint,
    m1: M1,
    policy: TrustPolicy,
    rng: crypto.SeededRandom,
    address: str,
    now: int,
) -> CookieChallenge | tuple[ResponderPending, M2]:
    """Handle M1.

    Without a valid cookie this is stateless: a challenge is returned and
    nothing is allocated, generated or signed.  The initiator certificate is
    checked before any per-session work.
    """
    if not _cookie_valid(ep, m1, address, now):
        ep.counters["cookies_issued"] += 1
        return CookieChallenge(m1.session_id, make_cookie(ep, m1, address, now // COOKIE_WINDOW))
    _check_cert(ep, m1.initiator_cert, now)
    if m1.session_id in ep.seen_sessions:
        raise HandshakeRejected(Reason.REPLAY_OR_REORDER, "replayed M1")
    if len(m1.nonce_i) != crypto.HANDSHAKE_NONCE_LEN:
        raise HandshakeRejected(Reason.STATE, "bad initiator nonce length")

    nonce_r = rng.bytes(crypto.HANDSHAKE_NONCE_LEN)
    eph = crypto.generate_ephemeral_keypair(rng)
    ep.counters["ephemerals_generated"] += 1
    th2 = _transcript_m2(m1, ep.cert, nonce_r, eph.public)
    quote_r = generate_quote(ep.attestation.secret, ep.identity, ep.measurements, m1.nonce_i, th2)
    ep.counters["quotes_signed"] += 1
    sig_r = crypto.sign(ep.attestation.secret, b"stcp/sig_r" + th2)
    m2 = M2(m1.session_id, ep.cert, nonce_r, eph.public, quote_r, sig_r)
    ep.counters["sessions_allocated"] += 1
    ep.seen_sessions.add(m1.session_id)
    th3 = _transcript_m3(th2, quote_r, sig_r)
    return ResponderPending(ep, m1, m1.initiator_cert, nonce_r, eph, m2, th3), m2


def _fail(pending) -> None:
    pending.ephemeral.secret.zeroize()
    pending.state = State.FAILED


def complete(
    pending: InitiatorPending, m2: M2, policy: TrustPolicy, now: int
) -> tuple[StcpSession, M3]:
    if pending.state is not State.AWAIT_M2:
        raise HandshakeRejected(Reason.STATE, f"initiator is {pending.state.value}")
    try:
        return _complete(pending, m2, policy, now)
    except (StcpRejected, crypto.CryptoError) as exc:
        _fail(pending)
        if isinstance(exc, crypto.InvalidPeerKey):
            raise HandshakeRejected(Reason.INVALID_PEER_KEY, str(exc)) from exc
        if isinstance(exc, crypto.CryptoError):
            raise HandshakeRejected(Reason.STATE, str(exc)) from exc
        raise


def _complete(pending: InitiatorPending, m2: M2, policy: TrustPolicy, now: int):
    ep = pending.endpoint
    if m2.session_id != pending.session_id:
        raise HandshakeRejected(Reason.WRONG_SESSION, "M2 for another session")
    cert = m2.responder_cert
    _check_cert(ep, cert, now)
    if cert.subject != pending.peer:
        raise HandshakeRejected(Reason.BAD_CERT, f"expected {pending.peer}, got {cert.subject}")
    if pending.pinned_fingerprint is not None and cert.fingerprint != pending.pinned_fingerprint:
        raise HandshakeRejected(Reason.BAD_CERT, "certificate fingerprint does not match pin")
    th2 = _transcript_m2(pending.m1, cert, m2.nonce_r, m2.ephemeral_pub_r)
    if not crypto.verify(cert.public_key, b"stcp/sig_r" + th2, m2.sig_r):
        raise HandshakeRejected(Reason.BAD_SIGNATURE, "responder signature")
    status = _check_quote(m2.quote_r, cert, policy, pending.nonce_i, th2)

    th3 = _transcript_m3(th2, m2.quote_r, m2.sig_r)
    quote_i = generate_quote(
        ep.attestation.secret, ep.identity, ep.measurements, m2.nonce_r, th3
    )
    ep.counters["quotes_signed"] += 1
    sig_i = crypto.sign(ep.attestation.secret, b"stcp/sig_i" + th3)
    th_final = _transcript_final(th3, quote_i, sig_i)
    dh = crypto.derive_shared_secret(pending.ephemeral.secret, m2.ephemeral_pub_r)
    keys = derive_session_keys(dh, pending.nonce_i, m2.nonce_r, th_final)
    pending.ephemeral.secret.zeroize()
    pending.state = State.ESTABLISHED
    m3 = M3(pending.session_id, quote_i, sig_i, confirm_tag(keys["mac_i2r"], th_final))
    session = StcpSession(
        pending.session_id, "initiator", ep.identity, cert.subject, cert, keys, th_final, status
    )
    return session, m3


def finalize(pending: ResponderPending, m3: M3, policy: TrustPolicy) -> StcpSession:
    if pending.state is not State.AWAIT_M3:
        raise HandshakeRejected(Reason.STATE, f"responder is {pending.state.value}")
    try:
        return _finalize(pending, m3, policy)
    except (StcpRejected, crypto.CryptoError) as exc:
        _fail(pending)
        if isinstance(exc, crypto.InvalidPeerKey):
            raise HandshakeRejected(Reason.INVALID_PEER_KEY, str(exc)) from exc
        if isinstance(exc, crypto.CryptoError):
            raise HandshakeRejected(Reason.STATE, str(exc)) from exc
        raise


def _finalize(pending: ResponderPending, m3: M3, policy: TrustPolicy) -> StcpSession:
    if m3.session_id != pending.m1.session_id:
        raise HandshakeRejected(Reason.WRONG_SESSION, "M3 for another session")
    cert = pending.peer_cert
    th3 = pending.transcript
    if not crypto.verify(cert.public_key, b"stcp/sig_i" + th3, m3.sig_i):
        raise HandshakeRejected(Reason.BAD_SIGNATURE, "initiator signature")
    status = _check_quote(m3.quote_i, cert, policy, pending.nonce_r, th3)
    th_final = _transcript_final(th3, m3.quote_i, m3.sig_i)
    dh = crypto.derive_shared_secret(pending.ephemeral.secret, pending.m1.ephemeral_pub_i)
    keys = derive_session_keys(dh, pending.m1.nonce_i, pending.nonce_r, th_final)
    pending.ephemeral.secret.zeroize()
    if not crypto.mac_equal(m3.confirm_mac, confirm_tag(keys["mac_i2r"], th_final)):
        for key in keys.values():
            key.key.zeroize()
        raise HandshakeRejected(Reason.BAD_CONFIRM_MAC)
    pending.state = State.ESTABLISHED
    return StcpSession(
        pending.m1.session_id,
        "responder",
        pending.endpoint.identity,
        cert.subject,
        cert,
        keys,
        th_final,
        status,
    )


def _record_nonce(sequence: int) -> bytes:
    return b"\x00" * 4 + sequence.to_bytes(8, "big")


def _record_aad(session_id: bytes, sequence: int) -> bytes:
    return session_id + sequence.to_bytes(8, "big")


def send_record(session: StcpSession, payload: bytes) -> Record:
    if session.state is not State.ESTABLISHED:
        raise RecordRejected(Reason.STATE, f"session is {session.state.value}")
    seq = session.send_counter
    ct = crypto.aead_seal(
        session.keys[f"enc_{session._out}"],
        _record_nonce(seq),
        _record_aad(session.session_id, seq),
        payload,
    )
    session.send_counter += 1
    return Record(session.session_id, seq, ct)


def recv_record(session: StcpSession, record: Record) -> bytes:
    if session.state is not State.ESTABLISHED:
        raise RecordRejected(Reason.WRONG_SESSION, f"session is {session.state.value}")
    if record.session_id != session.session_id:
        raise RecordRejected(Reason.WRONG_SESSION)
    if record.sequence != session.recv_counter:
        raise RecordRejected(
            Reason.REPLAY_OR_REORDER, f"got {record.sequence}, expected {session.recv_counter}"
        )
    try:
        payload = crypto.aead_open(
            session.keys[f"enc_{session._in}"],
            _record_nonce(record.sequence),
            _record_aad(session.session_id, record.sequence),
            record.ciphertext,
        )
    except crypto.AeadAuthFail as exc:
        raise RecordRejected(Reason.AEAD_AUTH_FAIL) from exc
    session.recv_counter += 1
    return payload
