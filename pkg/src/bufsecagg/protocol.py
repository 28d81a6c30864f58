"""Buffered secure-aggregation protocol: server state machine and user role.

The server keeps a K-slot buffer. Users arrive one at a time (admission is
serial), get granted the next free slot k together with the round's
attribute public keys and the sealed seeds earlier uploaders addressed to
slot k, and reply with a single upload:

    masked = quantize(alpha * update)
             - sum of masks from every earlier slot (seeds opened with the
               slot's secret key)
             + one fresh mask per later slot (seed sealed to that slot's
               attribute)

plus the staleness weight alpha in the clear and the sealed seeds for the
later slots. Across a full buffer every mask appears once with each sign,
so the committed aggregate equals the field sum of the quantized inputs.

A user that goes silent after a grant is timed out; its slot and the
buffered ciphertexts are re-granted untouched to the next arrival. The
upload that completes the buffer commits the round: the engine emits the
aggregate, bumps the round counter and regenerates the attribute set so
stale slot keys cannot open anything in later rounds.
"""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import FieldVector, QuantizerConfig, dequantize, quantize
from .prg import Seed, expand
from .vault import (
    AccessDenied,
    Attribute,
    AttributeAuthority,
    AttributePublicKey,
    AuthorityRejected,
    PublicParams,
    SealedSeed,
)
from .vault import decrypt as vault_decrypt
from .vault import encrypt as vault_encrypt

DEFAULT_TIMEOUT = 30.0
TOKEN_BYTES = 16


class ServerBusy(Exception):
    """A grant is already in flight; connection must queue."""


class ProtocolViolation(Exception):
    """Upload broke a protocol invariant; the slot was not consumed."""


class UserAbort(Exception):
    """User-side run aborted before upload (key refusal or bad grant)."""


@dataclass(frozen=True)
class SlotGrant:
    """Everything a user needs to occupy a slot, minus its own update."""

    round_id: int
    slot: int
    buffer_size: int
    attribute_keys: tuple[AttributePublicKey, ...]
    incoming: tuple[SealedSeed, ...]
    token: bytes
    deadline: float


@dataclass(frozen=True)
class UploadMsg:
    masked_update: FieldVector
    staleness: float
    outgoing: tuple[SealedSeed, ...]


@dataclass(frozen=True)
class RoundResult:
    """Committed buffer: field sum of the K masked uploads."""

    aggregate: FieldVector
    staleness_total: float
    round_id: int
    contributor_count: int


@dataclass
class PendingGrant:
    slot: int
    token: bytes
    deadline: float


@dataclass
class RoundState:
    """Mutable server-side state for the round in progress."""

    buffer_size: int
    cursor: int
    accumulator: FieldVector
    staleness_sum: float
    ciphertext_buffers: list[list[SealedSeed]]
    attribute_keys: list[AttributePublicKey]
    round_id: int
    pending: PendingGrant | None = None


class ServerEngine:
    """Serial protocol engine: one grant in flight, transitions applied in order."""

    def __init__(
        self,
        aa: AttributeAuthority,
        buffer_size: int,
        dim: int,
        modulus: int,
        timeout: float = DEFAULT_TIMEOUT,
        round_id: int = 0,
        token_rng: np.random.Generator | None = None,
    ):
        if buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.aa = aa
        self.dim = dim
        self.modulus = modulus
        self.timeout = timeout
        self._token_rng = token_rng
        self.state = RoundState(
            buffer_size=buffer_size,
            cursor=0,
            accumulator=FieldVector.zeros(dim, modulus),
            staleness_sum=0.0,
            ciphertext_buffers=[[] for _ in range(buffer_size)],
            attribute_keys=[],
            round_id=round_id,
        )
        self._refresh_attributes()

    def _refresh_attributes(self) -> None:
        st = self.state
        self.aa.begin_round(st.round_id)
        st.attribute_keys = self.aa.round_attribute_keys(st.round_id, st.buffer_size)

    def _mint_token(self) -> bytes:
        if self._token_rng is None:
            return secrets.token_bytes(TOKEN_BYTES)
        return self._token_rng.bytes(TOKEN_BYTES)

    def on_connect(self, now: float) -> SlotGrant:
        """Admit one user: grant the cursor slot and start its timeout clock."""
        st = self.state
        if st.pending is not None:
            raise ServerBusy("a slot grant is already in flight")
        if st.cursor >= st.buffer_size:
            raise ProtocolViolation("round already complete")  # unreachable: commits auto-advance
        slot = st.cursor
        token = self._mint_token()
        self.aa.register_grant(Attribute(st.round_id, slot), token)
        st.pending = PendingGrant(slot=slot, token=token, deadline=now + self.timeout)
        return SlotGrant(
            round_id=st.round_id,
            slot=slot,
            buffer_size=st.buffer_size,
            attribute_keys=tuple(st.attribute_keys),
            incoming=tuple(st.ciphertext_buffers[slot]),
            token=token,
            deadline=st.pending.deadline,
        )

    def on_timeout(self, now: float) -> bool:
        """Abort the in-flight grant once its deadline passed.

        The slot is not consumed: the next connection receives the same slot
        with the same buffered ciphertexts. Returns True if a grant was
        cleared, False for a no-op.
        """
        st = self.state
        if st.pending is None or now < st.pending.deadline:
            return False
        st.pending = None
        return True

    def abort_pending(self) -> bool:
        """Unconditionally drop the in-flight grant (connection reset path)."""
        if self.state.pending is None:
            return False
        self.state.pending = None
        return True

    def _validate_upload(self, up: UploadMsg, slot: int) -> None:
        st = self.state
        if up.masked_update.dim != self.dim:
            raise ProtocolViolation(
                f"masked update has dim {up.masked_update.dim}, expected {self.dim}"
            )
        if up.masked_update.modulus != self.modulus:
            raise ProtocolViolation("masked update modulus mismatch")
        if not math.isfinite(up.staleness) or up.staleness <= 0:
            raise ProtocolViolation(f"staleness weight must be positive, got {up.staleness}")
        expected = st.buffer_size - slot - 1
        if len(up.outgoing) != expected:
            raise ProtocolViolation(
                f"slot {slot} must send {expected} sealed seeds, got {len(up.outgoing)}"
            )
        for j, sealed in zip(range(slot + 1, st.buffer_size), up.outgoing):
            if sealed.attribute != Attribute(st.round_id, j):
                raise ProtocolViolation(
                    f"sealed seed addressed to {sealed.attribute}, expected slot {j}"
                )
            if sealed.origin_slot != slot:
                raise ProtocolViolation(
                    f"sealed seed claims origin {sealed.origin_slot}, expected {slot}"
                )

    def on_upload(self, up: UploadMsg) -> RoundResult | None:
        """Store an upload for the pending slot; commit when the buffer fills.

        A violating upload aborts the grant like a timeout would: the slot
        stays free for the next connection and nothing is accumulated.
        """
        st = self.state
        if st.pending is None:
            raise ProtocolViolation("upload without a pending grant")
        slot = st.pending.slot
        try:
            self._validate_upload(up, slot)
        except ProtocolViolation:
            st.pending = None
            raise
        st.accumulator = st.accumulator + up.masked_update
        st.staleness_sum += up.staleness
        for j, sealed in zip(range(slot + 1, st.buffer_size), up.outgoing):
            st.ciphertext_buffers[j].append(sealed)
        st.cursor += 1
        st.pending = None
        if st.cursor < st.buffer_size:
            return None
        result = RoundResult(
            aggregate=st.accumulator.copy(),
            staleness_total=st.staleness_sum,
            round_id=st.round_id,
            contributor_count=st.buffer_size,
        )
        self._advance_round()
        return result

    def _advance_round(self) -> None:
        st = self.state
        st.round_id += 1
        st.cursor = 0
        st.accumulator = FieldVector.zeros(self.dim, self.modulus)
        st.staleness_sum = 0.0
        st.ciphertext_buffers = [[] for _ in range(st.buffer_size)]
        st.pending = None
        self._refresh_attributes()


@dataclass(frozen=True)
class UserRoundLog:
    """User-side record of one protocol run, for transcripts and audits."""

    slot: int
    alpha: float
    quantized: FieldVector
    masked: FieldVector
    outgoing_seeds: dict[int, Seed]


def user_run(
    update: np.ndarray,
    local_timestamp: int,
    grant: SlotGrant,
    aa,
    pp: PublicParams,
    cfg: QuantizerConfig,
    staleness_fn,
    rng: np.random.Generator | None = None,
    quant_rng: np.random.Generator | None = None,
) -> tuple[UploadMsg, UserRoundLog]:
    """Run the user side of the protocol for one granted slot.

    aa is anything exposing issue_key(attribute, token); in-process this is
    the AttributeAuthority itself, over the wire a small client proxy.
    Masks and sealing randomness come from rng, quantization randomness from
    quant_rng (defaults to rng, or OS entropy when both are None).

    Aborts without uploading if the key authority refuses the slot key or
    any incoming sealed seed fails to open: uploading a partially unmasked
    vector would permanently break cancellation for the round.
    """
    t = grant.round_id
    if local_timestamp > t:
        raise UserAbort(f"local timestamp {local_timestamp} is ahead of round {t}")
    alpha = float(staleness_fn(t - local_timestamp))

    try:
        sk = aa.issue_key(Attribute(t, grant.slot), grant.token)
    except AuthorityRejected as exc:
        raise UserAbort(f"key authority refused slot key: {exc.reason}") from exc

    if quant_rng is None:
        quant_rng = rng if rng is not None else np.random.default_rng()
    arr = np.asarray(update, dtype=np.float64)
    quantized = quantize(alpha * arr, cfg, quant_rng)
    dim = quantized.dim

    masked = quantized
    for sealed in grant.incoming:
        try:
            s = vault_decrypt(pp, sealed, sk)
        except AccessDenied as exc:
            raise UserAbort(f"incoming sealed seed failed to open: {exc}") from exc
        masked = masked - expand(s, dim, cfg.modulus)

    outgoing: list[SealedSeed] = []
    outgoing_seeds: dict[int, Seed] = {}
    for j in range(grant.slot + 1, grant.buffer_size):
        s = Seed.fresh(rng)
        masked = masked + expand(s, dim, cfg.modulus)
        outgoing.append(vault_encrypt(pp, s, grant.attribute_keys[j], grant.slot, rng))
        outgoing_seeds[j] = s

    msg = UploadMsg(masked_update=masked, staleness=alpha, outgoing=tuple(outgoing))
    log = UserRoundLog(
        slot=grant.slot,
        alpha=alpha,
        quantized=quantized,
        masked=masked,
        outgoing_seeds=outgoing_seeds,
    )
    return msg, log


def unmask_aggregate(result: RoundResult, cfg: QuantizerConfig) -> np.ndarray:
    """Staleness-weighted mean of the committed updates, back in reals."""
    if result.staleness_total <= 0:
        raise ValueError("staleness total must be positive")
    return dequantize(result.aggregate, cfg, result.staleness_total)


@dataclass(frozen=True)
class SlotRecord:
    """Transcript entry for one committed slot."""

    slot: int
    alpha: float
    update: np.ndarray
    quantized: FieldVector
    masked: FieldVector
    outgoing_seeds: dict[int, Seed]


@dataclass
class RoundTranscript:
    """Full trace of one protocol round, including aborted grants."""

    buffer_size: int
    dim: int
    modulus: int
    round_id: int
    records: list[SlotRecord] = dc_field(default_factory=list)
    events: list[tuple] = dc_field(default_factory=list)
    result: RoundResult | None = None


@dataclass
class UserScript:
    """Scripted arrival for the round driver.

    drop: None for a normal upload, "before-key" for a user that vanishes
    without touching the authority, "after-key" for one that claims its
    slot key (and opens its incoming seeds) before vanishing.
    """

    update: np.ndarray
    local_timestamp: int = 0
    drop: str | None = None


def run_round(
    engine: ServerEngine,
    pp: PublicParams,
    scripts: list[UserScript],
    cfg: QuantizerConfig,
    staleness_fn,
    rng: np.random.Generator,
    quant_rng: np.random.Generator | None = None,
    start: float = 0.0,
) -> RoundTranscript:
    """Drive arrivals through the engine until the round commits.

    Returns a partial transcript (result None) if the scripts run out
    early; that is how prefix transcripts for collusion analysis are made.
    """
    transcript = RoundTranscript(
        buffer_size=engine.state.buffer_size,
        dim=engine.dim,
        modulus=engine.modulus,
        round_id=engine.state.round_id,
    )
    now = start
    for script in scripts:
        grant = engine.on_connect(now)
        transcript.events.append(("connect", grant.slot, now))
        if script.drop is not None:
            if script.drop == "after-key":
                # the dropped user got as far as holding the slot key
                sk = engine.aa.issue_key(Attribute(grant.round_id, grant.slot), grant.token)
                for sealed in grant.incoming:
                    vault_decrypt(pp, sealed, sk)
            now = grant.deadline
            engine.on_timeout(now)
            transcript.events.append(("timeout", grant.slot, now))
            continue
        msg, log = user_run(
            script.update,
            script.local_timestamp,
            grant,
            engine.aa,
            pp,
            cfg,
            staleness_fn,
            rng=rng,
            quant_rng=quant_rng,
        )
        result = engine.on_upload(msg)
        transcript.events.append(("upload", grant.slot, now))
        transcript.records.append(
            SlotRecord(
                slot=log.slot,
                alpha=log.alpha,
                update=np.asarray(script.update, dtype=np.float64),
                quantized=log.quantized,
                masked=log.masked,
                outgoing_seeds=log.outgoing_seeds,
            )
        )
        now += 1.0
        if result is not None:
            transcript.result = result
            transcript.events.append(("commit", result.round_id, now))
            break
    return transcript


def collusion_view(
    transcript: RoundTranscript, colluders: set[int], prefix: int | None = None
) -> FieldVector:
    """What the server plus colluding slots can strip from a partial sum.

    prefix is the number of accepted uploads considered (defaults to all
    committed slots). The view starts from the field sum of the first
    `prefix` masked uploads and removes everything the coalition knows: the
    quantized inputs of colluding slots and every mask whose seed involves
    a colluding slot on either end. What remains is the tightest value the
    coalition can compute; honest masks bridging the prefix boundary keep
    it pseudorandom, and when no such mask survives it collapses to the
    bare sum of the honest prefix inputs.
    """
    if prefix is None:
        prefix = len(transcript.records)
    if prefix > len(transcript.records):
        raise ValueError(f"prefix {prefix} exceeds committed slots {len(transcript.records)}")
    view = FieldVector.zeros(transcript.dim, transcript.modulus)
    records = transcript.records[:prefix]
    for rec in records:
        view = view + rec.masked
    for rec in records:
        if rec.slot in colluders:
            view = view - rec.quantized
        for j, s in rec.outgoing_seeds.items():
            if j >= prefix and (rec.slot in colluders or j in colluders):
                view = view - expand(s, transcript.dim, transcript.modulus)
    return view
