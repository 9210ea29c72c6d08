import enum
from dataclasses import dataclass

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teecred import crypto, stcp
from teecred.actors import Credential, CredentialSet, Report
from teecred.attest import MeasurementVector
from teecred.pki import Identity, Role
from teecred.procedures import StepMessage
from teecred.simnet.codec import DecodeError, EncodeError, decode, encode, wire
from teecred.simnet.network import Envelope

from .conftest import standard_world


def _handshake_messages():
    w = standard_world(creds=())
    a, b = w.actor("tsm"), w.actor("ta_a")
    rng = crypto.SeededRandom(3)
    pending, m1 = stcp.initiate(a.endpoint, b.identity, rng)
    challenge = stcp.respond(b.endpoint, m1, w.policy, rng, "tsm", 0)
    m1c = stcp.answer_cookie(pending, challenge)
    resp, m2 = stcp.respond(b.endpoint, m1c, w.policy, rng, "tsm", 0)
    sa, m3 = stcp.complete(pending, m2, w.policy, 0)
    rec = stcp.send_record(sa, b"hello")
    return [m1, challenge, m1c, m2, m3, rec]


MESSAGES = _handshake_messages()


@pytest.mark.parametrize("msg", MESSAGES, ids=lambda m: type(m).__name__)
def test_message_roundtrip(msg):
    assert decode(encode(msg)) == msg
    assert decode(encode(msg), type(msg)) == msg


@pytest.mark.parametrize("msg", MESSAGES, ids=lambda m: type(m).__name__)
def test_truncated_and_trailing_rejected(msg):
    data = encode(msg)
    with pytest.raises(DecodeError):
        decode(data[:-1])
    with pytest.raises(DecodeError):
        decode(data + b"\x00")


def test_expected_type_enforced():
    with pytest.raises(DecodeError):
        decode(encode(MESSAGES[0]), stcp.M2)


def test_domain_values_roundtrip():
    who = Identity("ta", Role.TA)
    values = [
        None, True, 0, (1 << 64) - 1, b"", "text", (1, b"x"), {"k": frozenset({b"a", b"b"})},
        MeasurementVector((b"\x01" * 32,)),
        Report(b"r" * 16, who, b"c" * 32, 9),
        StepMessage("p#1", "2", "2. x", {"ids": frozenset({b"a"})}, None),
        Envelope(1, "a", "b", "record", "p#1", "1", "1. STCP", b"body"),
    ]
    for v in values:
        assert decode(encode(v)) == v


def test_sets_and_maps_encode_canonically():
    assert encode({b"b": 1, b"a": 2}) == encode({b"a": 2, b"b": 1})
    assert encode(frozenset([3, 1, 2])) == encode(frozenset([2, 3, 1]))


def test_secrets_and_unregistered_types_refuse_to_encode():
    with pytest.raises(EncodeError):
        encode(crypto.Secret(b"x" * 32))

    @dataclass
    class Stray:
        x: int

    with pytest.raises(EncodeError):
        encode(Stray(1))
    with pytest.raises(EncodeError):
        encode(-1)
    with pytest.raises(EncodeError):
        encode(1.5)


def test_field_types_checked_on_decode():
    good = encode(Envelope(1, "a", "b", "record", "p", "1", "l", b"x"))
    # swap the bytes body for a str of the same length: tag 4 (str) instead of 3 (bytes)
    idx = good.rindex(b"\x03\x00\x00\x00\x01x")
    bad = good[:idx] + b"\x04" + good[idx + 1 :]
    with pytest.raises(DecodeError):
        decode(bad)


def test_wire_ids_are_unique():
    class Colour(enum.Enum):
        RED = 1

    with pytest.raises(ValueError):
        wire(20)(Colour)


@settings(max_examples=300)
@given(st.binary(max_size=200))
def test_decode_is_total(data):
    try:
        decode(data)
    except DecodeError:
        pass


@settings(max_examples=200)
@given(st.sampled_from([encode(m) for m in MESSAGES]), st.integers(0, 10_000), st.integers(1, 255))
def test_mutated_messages_never_crash(data, pos, xor):
    b = bytearray(data)
    b[pos % len(b)] ^= xor
    try:
        decode(bytes(b))
    except DecodeError:
        pass


leaf = st.one_of(st.none(), st.booleans(), st.integers(0, (1 << 64) - 1), st.binary(max_size=16),
                 st.text(max_size=8))
tree = st.recursive(
    leaf,
    lambda kids: st.one_of(st.tuples(kids, kids), st.lists(kids, max_size=4).map(tuple),
                           st.dictionaries(st.binary(max_size=4), kids, max_size=4)),
    max_leaves=12,
)


@given(tree)
def test_roundtrip_property(value):
    assert decode(encode(value)) == value


def test_credential_set_roundtrip():
    w = standard_world()
    held = w.actor("ta_a").holdings()
    assert isinstance(held, CredentialSet) and len(held) == 3
    assert decode(encode(held)) == held
    assert all(isinstance(c, Credential) for c in held)
