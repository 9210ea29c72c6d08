"""Offline attacker oracles.

These play the role of an attacker who recorded a session and later obtained
long-term keys.  Each one returns whether the attack succeeded; a correct
system makes every one of them fail, and the positive controls prove the
oracle would notice if it did not.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import crypto, stcp
from ..actors import BackupAuthority, CredentialSet
from ..pki import Role
from .codec import DecodeError, decode, encode


@dataclass(frozen=True)
class RecordedHandshake:
    m1: stcp.M1
    m2: stcp.M2
    m3: stcp.M3
    records: tuple[stcp.Record, ...] = ()

    @property
    def transcript_hash(self) -> bytes:
        return stcp.wire_transcript_hash(self.m1, self.m2, self.m3)


def _scalar(value: bytes) -> bytes:
    return crypto.digest(value) if len(value) != crypto.KEY_LEN else value


def dh_candidates(hs: RecordedHandshake, long_term: dict[str, bytes]) -> list[bytes]:
    """Every shared-secret guess an attacker holding ``long_term`` can make."""
    publics = (hs.m1.ephemeral_pub_i, hs.m2.ephemeral_pub_r)
    out = [b"\x00" * crypto.KEY_LEN, hs.transcript_hash, hs.m1.nonce_i, hs.m2.nonce_r]
    for value in long_term.values():
        out.append(value)
        for pub in publics:
            try:
                out.append(crypto.derive_shared_secret(_scalar(value), pub))
            except crypto.CryptoError:
                continue
    return out


def confirms(hs: RecordedHandshake, dh: bytes) -> bool:
    th = hs.transcript_hash
    keys = stcp.derive_session_keys(dh, hs.m1.nonce_i, hs.m2.nonce_r, th)
    return crypto.mac_equal(stcp.confirm_tag(keys["mac_i2r"], th), hs.m3.confirm_mac)


def recover_session(hs: RecordedHandshake, long_term: dict[str, bytes]) -> bytes | None:
    """Return the shared secret if any guess reproduces the confirmation MAC."""
    for guess in dh_candidates(hs, long_term):
        if confirms(hs, guess):
            return guess
    return None


@dataclass(frozen=True)
class FsTrial:
    broken: bool
    control_recovered: bool
    records_read: int


def forward_secrecy_trial(seed: int) -> FsTrial:
    """Record one handshake, leak every long-term secret, try to recover keys."""
    from ..world import World

    world = World(seed)
    a = world.add("initiator", Role.TSM)
    b = world.add("responder", Role.TA)
    world.arm()
    rng = crypto.SeededRandom(seed).fork("fs-trial")
    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    challenge = stcp.respond(b.endpoint, m1, world.policy, rng, "initiator", 0)
    m1 = stcp.answer_cookie(pending, challenge)
    resp, m2 = stcp.respond(b.endpoint, m1, world.policy, rng, "initiator", 0)
    # positive control: the ephemeral secret an honest party erases
    ephemeral = pending.ephemeral.secret.reveal()
    s_a, m3 = stcp.complete(pending, m2, world.policy, 0)
    s_b = stcp.finalize(resp, m3, world.policy)
    rec = stcp.send_record(s_a, b"payload")
    stcp.recv_record(s_b, rec)
    hs = RecordedHandshake(m1, m2, m3, (rec,))

    long_term = {k: v for k, v in world.secrets.items() if not k.startswith("session/")}
    broken = recover_session(hs, long_term) is not None
    control = crypto.derive_shared_secret(ephemeral, m2.ephemeral_pub_r)
    return FsTrial(broken, confirms(hs, control), _read_records(hs, control))


def _read_records(hs: RecordedHandshake, dh: bytes) -> int:
    th = hs.transcript_hash
    keys = stcp.derive_session_keys(dh, hs.m1.nonce_i, hs.m2.nonce_r, th)
    n = 0
    for rec in hs.records:
        try:
            crypto.aead_open(keys["enc_i2r"], b"\x00" * 4 + rec.sequence.to_bytes(8, "big"),
                             rec.session_id + rec.sequence.to_bytes(8, "big"), rec.ciphertext)
            n += 1
        except crypto.AeadAuthFail:
            pass
    return n


def backup_exposed_to(world, secrets: dict[str, bytes]) -> list[str]:
    """Try to open every stored backup with keys derivable from ``secrets``.

    Returns labels of the backups that opened.  Used with a compromised TSM
    or BA: neither holds the TA-internal backup key.
    """
    opened = []
    for ba in world.actors.values():
        if not isinstance(ba, BackupAuthority):
            continue
        for (owner, bid), entry in sorted(ba.store.items(), key=lambda kv: kv[0][1]):
            try:
                blob = decode(entry.payload)
            except DecodeError:
                continue
            aad = b"backup" + encode(owner)
            for value in secrets.values():
                for key in (value, crypto.kdf(value, b"", b"backup" + encode(owner), crypto.KEY_LEN)):
                    if len(key) != crypto.KEY_LEN:
                        continue
                    try:
                        plain = crypto.aead_open(key, blob.nonce, aad, blob.ciphertext)
                    except crypto.AeadAuthFail:
                        continue
                    if isinstance(decode(plain), CredentialSet):
                        opened.append(f"{owner}/{bid.hex()[:12]}")
    return opened

