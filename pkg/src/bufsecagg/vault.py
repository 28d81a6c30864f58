"""Attribute-gated seed escrow backed by a trusted key authority.

A user that uploads early must hand a mask seed to "whoever later occupies
buffer slot j of round t" without knowing who that will be. The authority
derives one X25519 keypair per (round, slot) attribute from its master
secret; the public halves are republished every round (they travel inside
slot grants), while the private half is issued once per slot grant. Sealing
a seed is then plain ECIES: an ephemeral exchange against the attribute's
public key followed by ChaCha20-Poly1305 with the attribute bound into the
associated data.

Any failure to open a sealed seed, whether a mismatched attribute, a key
from a different authority, a stale round or a tampered ciphertext, raises
the same AccessDenied so callers cannot distinguish the causes.
"""

from __future__ import annotations

import secrets
import struct
import threading
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .prg import SEED_BYTES, Seed

KEY_BYTES = 32
NONCE_BYTES = 12
SYSTEM_ID_BYTES = 16

# sealed blob = ephemeral public key (32) + AEAD ciphertext of the seed (+16 tag)
CIPHERTEXT_BYTES = 32 + SEED_BYTES + 16
# full wire size of one sealed seed: attribute + origin + nonce + length + blob
SEALED_WIRE_BYTES = 12 + 4 + NONCE_BYTES + 4 + CIPHERTEXT_BYTES

_SLOT_KEY_INFO = b"bufsecagg/slot-key/v1"
_WRAP_INFO = b"bufsecagg/seal/v1"


class AccessDenied(Exception):
    """Sealed seed could not be opened with the presented key."""


class AuthorityRejected(Exception):
    """The key authority refused an issuance request."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True, order=True)
class Attribute:
    """Buffer position identity: global round plus slot index."""

    round_id: int
    slot: int

    def pack(self) -> bytes:
        return struct.pack(">QI", self.round_id, self.slot)

    @classmethod
    def unpack(cls, data: bytes) -> "Attribute":
        round_id, slot = struct.unpack(">QI", data)
        return cls(round_id, slot)


@dataclass(frozen=True)
class PublicParams:
    """System-wide public material, stable for one training run."""

    system_id: bytes
    version: int = 1
    aa_endpoint: str = "local"

    def to_bytes(self) -> bytes:
        ep = self.aa_endpoint.encode()
        return struct.pack(">16sI I", self.system_id, self.version, len(ep)) + ep

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicParams":
        system_id, version, n = struct.unpack(">16sI I", data[:24])
        return cls(system_id=system_id, version=version, aa_endpoint=data[24:24 + n].decode())


@dataclass(frozen=True)
class MasterKey:
    """Root secret held only by the authority; never leaves it."""

    secret: bytes

    def __repr__(self) -> str:  # keep the secret out of logs
        return "MasterKey(<32 bytes>)"


@dataclass(frozen=True)
class AttributeSecretKey:
    """Private half for one attribute, issued by the authority."""

    attribute: Attribute
    secret: bytes


@dataclass(frozen=True)
class AttributePublicKey:
    """Public half for one attribute; safe to hand to anyone."""

    attribute: Attribute
    public: bytes


@dataclass(frozen=True)
class SealedSeed:
    """Attribute-bound ciphertext of a mask seed.

    Wire layout: attribute round (8 bytes BE), attribute slot (4), origin
    slot (4), nonce (12), ciphertext length (4) then the ciphertext.
    """

    attribute: Attribute
    origin_slot: int
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return (
            self.attribute.pack()
            + struct.pack(">I", self.origin_slot)
            + self.nonce
            + struct.pack(">I", len(self.ciphertext))
            + self.ciphertext
        )

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["SealedSeed", int]:
        attr = Attribute.unpack(data[offset:offset + 12])
        offset += 12
        (origin,) = struct.unpack(">I", data[offset:offset + 4])
        offset += 4
        nonce = bytes(data[offset:offset + NONCE_BYTES])
        offset += NONCE_BYTES
        (ct_len,) = struct.unpack(">I", data[offset:offset + 4])
        offset += 4
        ct = bytes(data[offset:offset + ct_len])
        if len(ct) != ct_len:
            raise ValueError("truncated sealed seed")
        return cls(attribute=attr, origin_slot=origin, nonce=nonce, ciphertext=ct), offset + ct_len


def setup(aa_endpoint: str = "local") -> tuple[PublicParams, MasterKey]:
    """Fresh system: public parameters plus the authority's master secret."""
    pp = PublicParams(system_id=secrets.token_bytes(SYSTEM_ID_BYTES), aa_endpoint=aa_endpoint)
    mk = MasterKey(secret=secrets.token_bytes(KEY_BYTES))
    return pp, mk


def keygen(mk: MasterKey, attr: Attribute) -> AttributeSecretKey:
    """Derive the attribute's private key; deterministic per (mk, attr)."""
    scalar = HKDF(
        algorithm=SHA256(), length=KEY_BYTES, salt=None, info=_SLOT_KEY_INFO + attr.pack()
    ).derive(mk.secret)
    return AttributeSecretKey(attribute=attr, secret=scalar)


def attribute_public_key(mk: MasterKey, attr: Attribute) -> AttributePublicKey:
    sk = X25519PrivateKey.from_private_bytes(keygen(mk, attr).secret)
    raw = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return AttributePublicKey(attribute=attr, public=raw)


def _wrap_key(shared: bytes, pp: PublicParams, attr: Attribute, origin: int, eph_pub: bytes) -> bytes:
    info = _WRAP_INFO + pp.system_id + attr.pack() + struct.pack(">I", origin) + eph_pub
    return HKDF(algorithm=SHA256(), length=KEY_BYTES, salt=None, info=info).derive(shared)


def _aad(pp: PublicParams, attr: Attribute, origin: int) -> bytes:
    return pp.system_id + attr.pack() + struct.pack(">I", origin)


def encrypt(
    pp: PublicParams,
    seed: Seed,
    attr_key: AttributePublicKey,
    origin_slot: int,
    rng: np.random.Generator | None = None,
) -> SealedSeed:
    """Seal a seed to an attribute's public key.

    The nonce and the ephemeral exchange key come from rng when given
    (deterministic simulations) or OS entropy otherwise, so two calls never
    produce the same ciphertext.
    """
    if rng is None:
        eph_raw = secrets.token_bytes(KEY_BYTES)
        nonce = secrets.token_bytes(NONCE_BYTES)
    else:
        eph_raw = rng.bytes(KEY_BYTES)
        nonce = rng.bytes(NONCE_BYTES)
    eph = X25519PrivateKey.from_private_bytes(eph_raw)
    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(attr_key.public))
    key = _wrap_key(shared, pp, attr_key.attribute, origin_slot, eph_pub)
    ct = ChaCha20Poly1305(key).encrypt(nonce, seed.data, _aad(pp, attr_key.attribute, origin_slot))
    return SealedSeed(
        attribute=attr_key.attribute, origin_slot=origin_slot, nonce=nonce, ciphertext=eph_pub + ct
    )


def decrypt(pp: PublicParams, sealed: SealedSeed, sk: AttributeSecretKey) -> Seed:
    """Open a sealed seed; AccessDenied on any mismatch or tampering."""
    if sk.attribute != sealed.attribute:
        raise AccessDenied("attribute mismatch")
    if len(sealed.ciphertext) != CIPHERTEXT_BYTES or len(sealed.nonce) != NONCE_BYTES:
        raise AccessDenied("malformed ciphertext")
    eph_pub = sealed.ciphertext[:32]
    body = sealed.ciphertext[32:]
    try:
        priv = X25519PrivateKey.from_private_bytes(sk.secret)
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key = _wrap_key(shared, pp, sealed.attribute, sealed.origin_slot, eph_pub)
        data = ChaCha20Poly1305(key).decrypt(
            sealed.nonce, body, _aad(pp, sealed.attribute, sealed.origin_slot)
        )
    except (InvalidTag, ValueError):
        raise AccessDenied("decryption failed") from None
    return Seed(data)


class AttributeAuthority:
    """Trusted issuer of attribute keys with per-round single-claim policy.

    The aggregation server registers the grant token it minted for each
    slot (an out-of-band channel; in-process here). A secret key for
    (round, slot) is only issued to the holder of the currently registered
    token, so two users never hold the same live slot key: re-granting a
    slot after a timeout replaces the registered token and strands the old
    one. Requests for past or future rounds are rejected outright.

    Public halves are served freely; they carry no secret.
    """

    def __init__(self, pp: PublicParams | None = None, mk: MasterKey | None = None):
        if (pp is None) != (mk is None):
            raise ValueError("provide both pp and mk or neither")
        if pp is None:
            pp, mk = setup()
        self.pp = pp
        self._mk = mk
        self._lock = threading.Lock()
        self._current_round: int | None = None
        self._claims: dict[int, bytes] = {}  # slot -> registered grant token
        self._pub_cache: dict[int, list[AttributePublicKey]] = {}

    def begin_round(self, round_id: int) -> None:
        """Server notification that aggregation round round_id starts."""
        with self._lock:
            if self._current_round is not None and round_id < self._current_round:
                raise AuthorityRejected("round must not move backwards")
            if round_id != self._current_round:
                self._claims.clear()
                self._pub_cache.clear()
            self._current_round = round_id

    def round_attribute_keys(self, round_id: int, count: int) -> list[AttributePublicKey]:
        """Public keys for all slots of the current round."""
        with self._lock:
            if round_id != self._current_round:
                raise AuthorityRejected("stale round")
            cached = self._pub_cache.get(count)
            if cached is None:
                cached = [
                    attribute_public_key(self._mk, Attribute(round_id, s)) for s in range(count)
                ]
                self._pub_cache[count] = cached
            return list(cached)

    def register_grant(self, attr: Attribute, token: bytes) -> None:
        """Record the live grant token for a slot (server side, out of band)."""
        with self._lock:
            if attr.round_id != self._current_round:
                raise AuthorityRejected("stale round")
            self._claims[attr.slot] = token

    def issue_key(self, attr: Attribute, token: bytes) -> AttributeSecretKey:
        """Issue the slot's secret key to the current grant holder."""
        with self._lock:
            if attr.round_id != self._current_round:
                raise AuthorityRejected("stale round")
            expected = self._claims.get(attr.slot)
            if expected is None or expected != token:
                raise AuthorityRejected("slot not granted to requester")
            return keygen(self._mk, attr)
