"""Simulated measured platforms, quotes and quote verification."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from . import crypto
from .pki import Identity
from .simnet.codec import encode, wire

# measured components, in boot order, for the two TEE families we model
TEE_LAYOUTS = {
    "gp-tee": ("boot-rom", "trusted-os", "ta-image", "ta-config"),
    "enclave": ("enclave-loader", "enclave-image", "enclave-config"),
}


class AttestError(ValueError):
    pass


@dataclass(frozen=True)
class PlatformSnapshot:
    """Code and configuration loaded on a platform, in measurement order."""

    components: tuple[tuple[str, bytes], ...]
    style: str = "gp-tee"

    @classmethod
    def build(cls, style: str, **parts: bytes) -> PlatformSnapshot:
        try:
            layout = TEE_LAYOUTS[style]
        except KeyError:
            raise AttestError(f"unknown TEE style {style!r}") from None
        missing = [name for name in layout if name.replace("-", "_") not in parts]
        if missing:
            raise AttestError(f"snapshot missing components {missing}")
        return cls(tuple((n, parts[n.replace("-", "_")]) for n in layout), style)

    def patched(self, name: str, content: bytes) -> PlatformSnapshot:
        if name not in dict(self.components):
            raise AttestError(f"no component {name!r} in a {self.style} snapshot")
        comps = tuple((n, content if n == name else c) for n, c in self.components)
        return replace(self, components=comps)


@wire(10)
@dataclass(frozen=True)
class MeasurementVector:
    entries: tuple[bytes, ...]

    def __post_init__(self):
        if not self.entries:
            raise AttestError("measurement vector must be non-empty")

    @property
    def digest(self) -> bytes:
        return crypto.digest(encode(self))


def measure(snapshot: PlatformSnapshot) -> MeasurementVector:
    if not snapshot.components:
        raise AttestError("cannot measure an empty platform snapshot")
    return MeasurementVector(
        tuple(crypto.digest(encode((name, content))) for name, content in snapshot.components)
    )


@wire(11)
@dataclass(frozen=True)
class Quote:
    tee_identity: Identity
    measurements: MeasurementVector
    nonce: bytes
    context_binding: bytes
    signature: bytes = b""

    def tbs(self) -> bytes:
        return encode(replace(self, signature=b""))


class QuoteStatus(enum.Enum):
    TRUSTED = "Trusted"
    BAD_SIGNATURE = "BadSignature"
    STALE_NONCE = "StaleNonce"
    BINDING_MISMATCH = "BindingMismatch"
    UNKNOWN_PLATFORM = "UnknownPlatform"
    MEASUREMENT_MISMATCH = "MeasurementMismatch"

    def __bool__(self) -> bool:
        return self is QuoteStatus.TRUSTED


@dataclass
class TrustPolicy:
    """Expected-measurement registry, keyed by exact identity."""

    expected: dict[Identity, set[bytes]] = field(default_factory=dict)

    def register(self, identity: Identity, mv: MeasurementVector) -> None:
        self.expected.setdefault(identity, set()).add(mv.digest)

    def distrust(self, identity: Identity) -> None:
        self.expected[identity] = set()


def generate_quote(
    attestation_key: crypto.Secret | bytes,
    identity: Identity,
    mv: MeasurementVector,
    nonce: bytes,
    binding: bytes,
) -> Quote:
    if len(nonce) != crypto.HANDSHAKE_NONCE_LEN:
        raise AttestError(f"quote nonce must be {crypto.HANDSHAKE_NONCE_LEN} bytes")
    unsigned = Quote(identity, mv, bytes(nonce), bytes(binding))
    return replace(unsigned, signature=crypto.sign(attestation_key, unsigned.tbs()))


def verify_quote(
    quote: Quote,
    policy: TrustPolicy,
    expected_nonce: bytes,
    expected_binding: bytes,
    attestation_pubkey: bytes,
) -> QuoteStatus:
    if not crypto.verify(attestation_pubkey, quote.tbs(), quote.signature):
        return QuoteStatus.BAD_SIGNATURE
    if not crypto.mac_equal(quote.nonce, expected_nonce):
        return QuoteStatus.STALE_NONCE
    if not crypto.mac_equal(quote.context_binding, expected_binding):
        return QuoteStatus.BINDING_MISMATCH
    allowed = policy.expected.get(quote.tee_identity)
    if allowed is None:
        return QuoteStatus.UNKNOWN_PLATFORM
    if quote.measurements.digest not in allowed:
        return QuoteStatus.MEASUREMENT_MISMATCH
    return QuoteStatus.TRUSTED
