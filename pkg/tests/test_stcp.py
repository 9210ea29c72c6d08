from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teecred import crypto, stcp
from teecred.attest import QuoteStatus, generate_quote
from teecred.pki import CertificateAuthority, KeyUsage
from teecred.stcp import Reason

from .conftest import standard_world


@pytest.fixture
def pair():
    w = standard_world(creds=())
    return w, w.actor("tsm"), w.actor("ta_a")


def handshake(w, a, b, rng=None, address="tsm", now=0, pin=None):
    rng = rng or crypto.SeededRandom("hs")
    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng, pin)
    challenge = stcp.respond(b.endpoint, m1, w.policy, rng, address, now)
    m1c = stcp.answer_cookie(pending, challenge)
    resp, m2 = stcp.respond(b.endpoint, m1c, w.policy, rng, address, now)
    sa, m3 = stcp.complete(pending, m2, w.policy, now)
    sb = stcp.finalize(resp, m3, w.policy)
    return sa, sb, (m1c, m2, m3)


def reject(reason, fn, *args):
    with pytest.raises(stcp.StcpRejected) as info:
        fn(*args)
    assert info.value.reason is reason, info.value.label
    return info.value


def test_handshake_establishes_matching_keys(pair):
    w, a, b = pair
    sa, sb, _ = handshake(w, a, b)
    assert sa.state is sb.state is stcp.State.ESTABLISHED
    assert sa.transcript_hash == sb.transcript_hash
    assert {k: v.key.reveal() for k, v in sa.keys.items()} == {k: v.key.reveal() for k, v in sb.keys.items()}
    assert sa.peer_quote is sb.peer_quote is QuoteStatus.TRUSTED
    assert sa.peer == b.identity and sb.peer == a.identity


def test_first_m1_is_stateless(pair):
    w, a, b = pair
    pending, m1 = stcp.initiate(a.endpoint, b.identity, crypto.SeededRandom(1))
    before = dict(b.counters)
    out = stcp.respond(b.endpoint, m1, w.policy, crypto.SeededRandom(2), "tsm", 0)
    assert isinstance(out, stcp.CookieChallenge)
    for counter in ("ephemerals_generated", "quotes_signed", "sessions_allocated"):
        assert b.counters[counter] == before.get(counter, 0)
    assert b.counters["cookies_issued"] == before.get("cookies_issued", 0) + 1
    assert not b.endpoint.seen_sessions


def test_cookie_bound_to_address_and_time(pair):
    w, a, b = pair
    rng = crypto.SeededRandom(3)
    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    m1c = stcp.answer_cookie(pending, stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0))
    assert isinstance(stcp.respond(b.endpoint, m1c, w.policy, rng, "elsewhere", 0), stcp.CookieChallenge)
    late = 3 * stcp.COOKIE_WINDOW
    assert isinstance(stcp.respond(b.endpoint, m1c, w.policy, rng, "tsm", late), stcp.CookieChallenge)
    assert not isinstance(stcp.respond(b.endpoint, m1c, w.policy, rng, "tsm", stcp.COOKIE_WINDOW), stcp.CookieChallenge)


def _forged(cert, rng):
    rogue = CertificateAuthority(cert.issuer, crypto.generate_signing_keypair(rng))
    kp = crypto.generate_signing_keypair(rng)
    return rogue.issue(cert.subject, kp.public, (0, 1 << 40)), kp


def test_forged_initiator_certificate_rejected_before_allocation(pair):
    w, a, b = pair
    rng = crypto.SeededRandom(4)
    forged, kp = _forged(a.cert, rng)
    ep = replace(a.endpoint, cert=forged, attestation=kp)
    pending, m1 = stcp.initiate(ep, b.identity, rng)
    m1c = stcp.answer_cookie(pending, stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0))
    before = b.counters["ephemerals_generated"]
    reject(Reason.BAD_CERT, stcp.respond, b.endpoint, m1c, w.policy, rng, "tsm", 0)
    assert b.counters["ephemerals_generated"] == before


def test_forged_responder_certificate_rejected(pair):
    w, a, b = pair
    rng = crypto.SeededRandom(5)
    forged, kp = _forged(b.cert, rng)
    ep = replace(b.endpoint, cert=forged, attestation=kp)
    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    m1c = stcp.answer_cookie(pending, stcp.respond(ep, m1, w.policy, rng, "tsm", 0))
    _, m2 = stcp.respond(ep, m1c, w.policy, rng, "tsm", 0)
    reject(Reason.BAD_CERT, stcp.complete, pending, m2, w.policy, 0)
    assert pending.state is stcp.State.FAILED


def test_command_certificate_is_not_an_attestation_certificate(pair):
    w, a, b = pair
    rng = crypto.SeededRandom(6)
    ep = replace(a.endpoint, cert=a.command_cert, attestation=a.command)
    assert a.command_cert.usage is KeyUsage.COMMAND
    pending, m1 = stcp.initiate(ep, b.identity, rng)
    m1c = stcp.answer_cookie(pending, stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0))
    reject(Reason.BAD_CERT, stcp.respond, b.endpoint, m1c, w.policy, rng, "tsm", 0)


def test_unexpected_peer_and_pin_mismatch(pair):
    w, a, b = pair
    other = w.actor("ta_b")
    rng = crypto.SeededRandom(7)
    pending, m1 = stcp.initiate(a.endpoint, other.identity, rng)
    m1c = stcp.answer_cookie(pending, stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0))
    _, m2 = stcp.respond(b.endpoint, m1c, w.policy, rng, "tsm", 0)
    reject(Reason.BAD_CERT, stcp.complete, pending, m2, w.policy, 0)
    with pytest.raises(stcp.StcpRejected, match="pin"):
        handshake(w, a, b, pin=other.cert.fingerprint)
    handshake(w, a, b, rng=crypto.SeededRandom(8), pin=b.cert.fingerprint)


def test_tampered_platform_quote_rejected():
    w = standard_world(creds=(), ta_a={"tampered": True})
    err = reject(Reason.QUOTE_REJECTED, handshake, w, w.actor("tsm"), w.actor("ta_a"))
    assert err.label == "QuoteRejected(MeasurementMismatch)"


def test_quote_from_another_handshake_or_context_rejected(pair):
    w, a, b = pair
    _, _, (old_m1, old_m2, _) = handshake(w, a, b, rng=crypto.SeededRandom(9))
    rng = crypto.SeededRandom(10)
    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    m1c = stcp.answer_cookie(pending, stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0))
    _, m2 = stcp.respond(b.endpoint, m1c, w.policy, rng, "tsm", 0)
    stale = replace(m2, quote_r=old_m2.quote_r)
    assert reject(Reason.QUOTE_REJECTED, stcp.complete, pending, stale, w.policy, 0).quote_status \
        is QuoteStatus.STALE_NONCE

    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    m1c = stcp.answer_cookie(pending, stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0))
    _, m2 = stcp.respond(b.endpoint, m1c, w.policy, rng, "tsm", 0)
    # right nonce, signed by the right key, but bound to some other transcript
    swapped = generate_quote(b.endpoint.attestation.secret, b.identity, b.endpoint.measurements,
                             m1c.nonce_i, b"\x00" * 32)
    err = reject(Reason.QUOTE_REJECTED, stcp.complete, pending, replace(m2, quote_r=swapped), w.policy, 0)
    assert err.label == "QuoteRejected(BindingMismatch)"


def test_replayed_handshake_messages_rejected(pair):
    w, a, b = pair
    rng = crypto.SeededRandom(11)
    sa, sb, (m1c, m2, m3) = handshake(w, a, b, rng=rng)
    reject(Reason.REPLAY_OR_REORDER, stcp.respond, b.endpoint, m1c, w.policy, rng, "tsm", 0)

    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    reject(Reason.WRONG_SESSION, stcp.complete, pending, m2, w.policy, 0)

    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    m1x = stcp.answer_cookie(pending, stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0))
    resp, _ = stcp.respond(b.endpoint, m1x, w.policy, rng, "tsm", 0)
    reject(Reason.WRONG_SESSION, stcp.finalize, resp, m3, w.policy)
    # same pending object cannot be completed twice
    reject(Reason.STATE, stcp.finalize, resp, m3, w.policy)


def test_bad_confirm_mac(pair):
    w, a, b = pair
    rng = crypto.SeededRandom(12)
    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    m1c = stcp.answer_cookie(pending, stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0))
    resp, m2 = stcp.respond(b.endpoint, m1c, w.policy, rng, "tsm", 0)
    _, m3 = stcp.complete(pending, m2, w.policy, 0)
    reject(Reason.BAD_CONFIRM_MAC, stcp.finalize, resp, replace(m3, confirm_mac=b"\x00" * 32), w.policy)


def test_invalid_peer_ephemeral(pair):
    w, a, b = pair
    rng = crypto.SeededRandom(13)
    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    # a dishonest but certified initiator advertises a low-order point
    pending.m1 = replace(m1, ephemeral_pub_i=b"\x00" * 32)
    m1c = stcp.answer_cookie(pending, stcp.respond(b.endpoint, pending.m1, w.policy, rng, "tsm", 0))
    resp, m2 = stcp.respond(b.endpoint, m1c, w.policy, rng, "tsm", 0)
    _, m3 = stcp.complete(pending, m2, w.policy, 0)
    reject(Reason.INVALID_PEER_KEY, stcp.finalize, resp, m3, w.policy)


def test_records_roundtrip_both_ways(pair):
    w, a, b = pair
    sa, sb, _ = handshake(w, a, b)
    for i in range(3):
        assert stcp.recv_record(sb, stcp.send_record(sa, b"i2r %d" % i)) == b"i2r %d" % i
        assert stcp.recv_record(sa, stcp.send_record(sb, b"r2i %d" % i)) == b"r2i %d" % i


def test_record_replay_reorder_tamper_and_wrong_session(pair):
    w, a, b = pair
    sa, sb, _ = handshake(w, a, b)
    r0, r1 = stcp.send_record(sa, b"zero"), stcp.send_record(sa, b"one")
    reject(Reason.REPLAY_OR_REORDER, stcp.recv_record, sb, r1)
    assert stcp.recv_record(sb, r0) == b"zero"
    reject(Reason.REPLAY_OR_REORDER, stcp.recv_record, sb, r0)
    bad = replace(r1, ciphertext=bytes([r1.ciphertext[0] ^ 1]) + r1.ciphertext[1:])
    reject(Reason.AEAD_AUTH_FAIL, stcp.recv_record, sb, bad)
    assert stcp.recv_record(sb, r1) == b"one"
    reject(Reason.WRONG_SESSION, stcp.recv_record, sb, replace(r1, session_id=b"x" * 16))
    # a record reflected back to its sender does not decrypt
    r2 = stcp.send_record(sa, b"two")
    reject(Reason.AEAD_AUTH_FAIL, stcp.recv_record, sa, replace(r2, sequence=0))


def test_closed_session_refuses_records(pair):
    w, a, b = pair
    sa, sb, _ = handshake(w, a, b)
    sa.close()
    assert all(k.key.erased for k in sa.keys.values())
    reject(Reason.STATE, stcp.send_record, sa, b"x")


@settings(max_examples=40, deadline=None)
@given(st.permutations(range(5)))
def test_only_in_order_delivery_is_accepted(order):
    w = standard_world(seed=2, creds=())
    sa, sb, _ = handshake(w, w.actor("tsm"), w.actor("ta_a"))
    records = [stcp.send_record(sa, bytes([i])) for i in range(5)]
    expected = 0
    for i in order:
        if i == expected:
            assert stcp.recv_record(sb, records[i]) == bytes([i])
            expected += 1
        else:
            reject(Reason.REPLAY_OR_REORDER, stcp.recv_record, sb, records[i])
    assert sb.recv_counter == expected


def test_nonces_and_keys_fresh_across_handshakes(pair):
    w, a, b = pair
    rng = crypto.SeededRandom(14)
    seen = set()
    for _ in range(50):
        sa, _, (m1, m2, _) = handshake(w, a, b, rng=rng)
        for item in (m1.nonce_i, m2.nonce_r, sa.keys["enc_i2r"].key.reveal()):
            assert item not in seen
            seen.add(item)
