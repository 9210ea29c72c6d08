"""Primitive suite and the default cipher profile.

Every other module goes through these helpers; nothing else imports
``cryptography`` directly.  All key generation draws from an injectable
:class:`SeededRandom`, so a world built from the same seed produces the same
keys, the same signatures (Ed25519 is deterministic) and the same ciphertexts
(AEAD nonces come from record counters).

Profile: Ed25519 signatures, X25519 key agreement, HKDF-SHA256, AES-256-GCM,
SHA-256.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

PROFILE = "ed25519+x25519+hkdf-sha256+aes256gcm+sha256"
SIGNATURE_ALGORITHM = "ed25519"
HASH_LEN = 32
KEY_LEN = 32
AEAD_NONCE_LEN = 12
AEAD_TAG_LEN = 16
HANDSHAKE_NONCE_LEN = 32
PUBLIC_KEY_LEN = 32
SIGNATURE_LEN = 64
KDF_MAX_LEN = 255 * HASH_LEN

Digest = bytes
Signature = bytes


class CryptoError(Exception):
    pass


class InvalidPeerKey(CryptoError):
    pass


class AeadAuthFail(CryptoError):
    """Ciphertext, nonce or associated data did not authenticate."""


class SeededRandom:
    """Deterministic byte source.

    Not a CSPRNG.  Simulation only: every world, adversary and campaign run
    owns one, and sub-streams are split off with :meth:`fork` so that adding
    an adversary rule never perturbs the keys a world generates.
    """

    def __init__(self, seed: int | bytes | str):
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "big", signed=True)
        elif isinstance(seed, str):
            seed = seed.encode()
        self._seed = hashlib.sha256(b"teecred-rng" + seed).digest()
        self._rng = random.Random(self._seed)

    def bytes(self, n: int) -> bytes:
        return self._rng.randbytes(n)

    def randrange(self, *args: int) -> int:
        return self._rng.randrange(*args)

    def choice(self, seq):
        return self._rng.choice(seq)

    def random(self) -> float:
        return self._rng.random()

    def shuffle(self, seq) -> None:
        self._rng.shuffle(seq)

    def fork(self, label: str) -> SeededRandom:
        return SeededRandom(self._seed + label.encode())


class Secret:
    """Secret byte string that refuses to be serialized.

    ``repr`` is redacted, pickling raises, and the canonical codec rejects it.
    :meth:`zeroize` overwrites the buffer; use after a value is no longer
    needed (e.g. ephemeral DH secrets once session keys exist).
    """

    __slots__ = ("_buf", "_erased")

    def __init__(self, data: bytes):
        self._buf = bytearray(data)
        self._erased = False

    def reveal(self) -> bytes:
        if self._erased:
            raise CryptoError("secret has been erased")
        return bytes(self._buf)

    def zeroize(self) -> None:
        for i in range(len(self._buf)):
            self._buf[i] = 0
        self._erased = True

    @property
    def erased(self) -> bool:
        return self._erased

    def __len__(self) -> int:
        return len(self._buf)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Secret):
            return NotImplemented
        return hmac.compare_digest(bytes(self._buf), bytes(other._buf))

    def __hash__(self) -> int:
        return id(self)

    def __repr__(self) -> str:
        return f"Secret(<{len(self._buf)} bytes redacted>)"

    def __reduce__(self):
        raise TypeError("Secret values are not serializable")


class KeyPurpose(enum.Enum):
    SESSION_ENCRYPT = "session-encrypt"
    SESSION_MAC = "session-mac"
    SEALING = "sealing"
    BACKUP = "backup"


@dataclass(frozen=True)
class SigningKeyPair:
    public: bytes
    secret: Secret = field(repr=False)
    algorithm: str = SIGNATURE_ALGORITHM


@dataclass(frozen=True)
class EphemeralKeyPair:
    public: bytes
    secret: Secret = field(repr=False)


@dataclass(frozen=True)
class SymmetricKey:
    key: Secret = field(repr=False)
    purpose: KeyPurpose

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise CryptoError(f"symmetric key must be {KEY_LEN} bytes")


def _raw(value: Secret | bytes) -> bytes:
    return value.reveal() if isinstance(value, Secret) else bytes(value)


def generate_signing_keypair(rng: SeededRandom) -> SigningKeyPair:
    sk = Ed25519PrivateKey.from_private_bytes(rng.bytes(32))
    return signing_keypair_from_seed(sk.private_bytes_raw())


def signing_keypair_from_seed(seed: bytes) -> SigningKeyPair:
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    return SigningKeyPair(public=sk.public_key().public_bytes_raw(), secret=Secret(seed))


def generate_ephemeral_keypair(rng: SeededRandom) -> EphemeralKeyPair:
    sk = X25519PrivateKey.from_private_bytes(rng.bytes(32))
    return EphemeralKeyPair(
        public=sk.public_key().public_bytes_raw(), secret=Secret(sk.private_bytes_raw())
    )


def x25519_public(secret: Secret | bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(_raw(secret)).public_key().public_bytes_raw()


def sign(secret: Secret | bytes, message: bytes) -> Signature:
    return Ed25519PrivateKey.from_private_bytes(_raw(secret)).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid Ed25519 signature.  Never raises."""
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public)).verify(
            bytes(signature), bytes(message)
        )
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def derive_shared_secret(own: Secret | bytes, peer: bytes) -> bytes:
    try:
        private = X25519PrivateKey.from_private_bytes(_raw(own))
        public = X25519PublicKey.from_public_bytes(bytes(peer))
        # cryptography rejects the all-zero output of low-order points
        return private.exchange(public)
    except (ValueError, TypeError) as exc:
        raise InvalidPeerKey(str(exc)) from exc


def kdf(secret: Secret | bytes, salt: bytes, info: bytes, out_len: int) -> bytes:
    if out_len <= 0:
        raise CryptoError("kdf output length must be positive")
    if out_len > KDF_MAX_LEN:
        raise CryptoError(f"kdf output length exceeds {KDF_MAX_LEN}")
    return HKDF(
        algorithm=hashes.SHA256(), length=out_len, salt=salt or None, info=info
    ).derive(_raw(secret))


def _aead_key(key: SymmetricKey | Secret | bytes) -> bytes:
    if isinstance(key, SymmetricKey):
        key = key.key
    return _raw(key)


def aead_seal(
    key: SymmetricKey | Secret | bytes, nonce: bytes, aad: bytes, plaintext: bytes
) -> bytes:
    if len(nonce) != AEAD_NONCE_LEN:
        raise CryptoError(f"AEAD nonce must be {AEAD_NONCE_LEN} bytes")
    return AESGCM(_aead_key(key)).encrypt(nonce, plaintext, aad)


def aead_open(
    key: SymmetricKey | Secret | bytes, nonce: bytes, aad: bytes, ciphertext: bytes
) -> bytes:
    try:
        return AESGCM(_aead_key(key)).decrypt(bytes(nonce), bytes(ciphertext), aad)
    except (InvalidTag, ValueError, TypeError) as exc:
        raise AeadAuthFail("AEAD authentication failed") from exc


def digest(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


def mac(key: SymmetricKey | Secret | bytes, data: bytes) -> bytes:
    return hmac.new(_aead_key(key), data, hashlib.sha256).digest()


def mac_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)
