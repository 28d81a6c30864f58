"""Message framing and payload codecs for the aggregation wire protocol.

Frame layout (all integers big-endian):

    msg_type   1 byte   (CONNECT=1, SLOT_GRANT=2, UPLOAD=3, ABORT=4,
                         AA_KEY_REQ=5, AA_KEY_RESP=6, AA_REJECT=7,
                         MODEL_PUSH=8)
    round_id   8 bytes
    payload_len 4 bytes
    payload    payload_len bytes

Upload payload: staleness as an 8-byte IEEE-754 double, dimension as 4
bytes, the masked vector as dimension 4-byte field elements, a 4-byte
sealed-seed count, then the sealed seeds (see vault.SealedSeed.to_bytes).
Field elements ship as full 4-byte words; no bit packing.

The loopback backend carries encoded frames through in-memory queues with
optional injected latency against a simulated clock; the TCP helpers move
the same bytes over a stream socket. Both paths produce identical payload
bytes for identical inputs.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import FieldVector
from .protocol import RoundResult, SlotGrant, UploadMsg
from .vault import Attribute, AttributePublicKey, AttributeSecretKey, SealedSeed

MSG_CONNECT = 1
MSG_SLOT_GRANT = 2
MSG_UPLOAD = 3
MSG_ABORT = 4
MSG_AA_KEY_REQ = 5
MSG_AA_KEY_RESP = 6
MSG_AA_REJECT = 7
MSG_MODEL_PUSH = 8

_KNOWN_TYPES = frozenset(range(1, 9))

HEADER_LEN = 13
MAX_PAYLOAD = (1 << 32) - 1

AA_REJECT_STALE_ROUND = 1
AA_REJECT_NOT_GRANTED = 2


class FramingError(Exception):
    """Base for framing failures."""


class IncompleteFrame(FramingError):
    """Byte source ended before one full frame was read."""


class UnknownMessageType(FramingError):
    """Frame carried a message type outside the protocol."""


@dataclass(frozen=True)
class Frame:
    msg_type: int
    round_id: int
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if frame.msg_type not in _KNOWN_TYPES:
        raise UnknownMessageType(f"unknown message type {frame.msg_type}")
    if len(frame.payload) > MAX_PAYLOAD:
        raise FramingError(f"payload of {len(frame.payload)} bytes exceeds frame limit")
    return struct.pack(">BQI", frame.msg_type, frame.round_id, len(frame.payload)) + frame.payload


def decode_frame(data, offset: int = 0) -> tuple[Frame, int]:
    """Decode one frame at offset; returns (frame, next offset).

    Bytes past the frame are left untouched.
    """
    if len(data) - offset < HEADER_LEN:
        raise IncompleteFrame("truncated frame header")
    msg_type, round_id, n = struct.unpack_from(">BQI", data, offset)
    if msg_type not in _KNOWN_TYPES:
        raise UnknownMessageType(f"unknown message type {msg_type}")
    start = offset + HEADER_LEN
    if len(data) - start < n:
        raise IncompleteFrame("truncated frame payload")
    return Frame(msg_type, round_id, bytes(data[start:start + n])), start + n


def read_frame(recv) -> Frame:
    """Read one frame from a recv(n) callable (e.g. socket.recv)."""
    header = _recv_exact(recv, HEADER_LEN)
    msg_type, round_id, n = struct.unpack(">BQI", header)
    if msg_type not in _KNOWN_TYPES:
        raise UnknownMessageType(f"unknown message type {msg_type}")
    payload = _recv_exact(recv, n) if n else b""
    return Frame(msg_type, round_id, payload)


def _recv_exact(recv, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = recv(n - got)
        if not chunk:
            raise IncompleteFrame(f"byte source ended after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# Payload codecs
# ---------------------------------------------------------------------------


def encode_upload(msg: UploadMsg) -> bytes:
    vec = msg.masked_update
    parts = [
        struct.pack(">dI", msg.staleness, vec.dim),
        vec.values.astype(">u4").tobytes(),
        struct.pack(">I", len(msg.outgoing)),
    ]
    parts.extend(sealed.to_bytes() for sealed in msg.outgoing)
    return b"".join(parts)


def decode_upload(payload: bytes, modulus: int) -> UploadMsg:
    staleness, dim = struct.unpack_from(">dI", payload, 0)
    offset = 12
    raw = np.frombuffer(payload, dtype=">u4", count=dim, offset=offset).astype(np.int64)
    if raw.size and int(raw.max()) >= modulus:
        raise FramingError("field element out of range for modulus")
    offset += 4 * dim
    (count,) = struct.unpack_from(">I", payload, offset)
    offset += 4
    seals = []
    for _ in range(count):
        sealed, offset = SealedSeed.from_bytes(payload, offset)
        seals.append(sealed)
    return UploadMsg(
        masked_update=FieldVector._wrap(raw, modulus),
        staleness=staleness,
        outgoing=tuple(seals),
    )


def encode_slot_grant(grant: SlotGrant) -> bytes:
    parts = [
        struct.pack(">II", grant.slot, grant.buffer_size),
        grant.token,
        struct.pack(">d", float(grant.deadline)),
    ]
    parts.extend(key.public for key in grant.attribute_keys)
    parts.append(struct.pack(">I", len(grant.incoming)))
    parts.extend(sealed.to_bytes() for sealed in grant.incoming)
    return b"".join(parts)


def decode_slot_grant(payload: bytes, round_id: int) -> SlotGrant:
    slot, buffer_size = struct.unpack_from(">II", payload, 0)
    token = bytes(payload[8:24])
    (deadline,) = struct.unpack_from(">d", payload, 24)
    offset = 32
    keys = []
    for s in range(buffer_size):
        keys.append(
            AttributePublicKey(
                attribute=Attribute(round_id, s), public=bytes(payload[offset:offset + 32])
            )
        )
        offset += 32
    (count,) = struct.unpack_from(">I", payload, offset)
    offset += 4
    incoming = []
    for _ in range(count):
        sealed, offset = SealedSeed.from_bytes(payload, offset)
        incoming.append(sealed)
    return SlotGrant(
        round_id=round_id,
        slot=slot,
        buffer_size=buffer_size,
        attribute_keys=tuple(keys),
        incoming=tuple(incoming),
        token=token,
        deadline=deadline,
    )


def encode_key_request(attr: Attribute, token: bytes) -> bytes:
    return attr.pack() + token


def decode_key_request(payload: bytes) -> tuple[Attribute, bytes]:
    return Attribute.unpack(payload[:12]), bytes(payload[12:28])


def encode_key_response(sk: AttributeSecretKey) -> bytes:
    return sk.attribute.pack() + sk.secret


def decode_key_response(payload: bytes) -> AttributeSecretKey:
    return AttributeSecretKey(attribute=Attribute.unpack(payload[:12]), secret=bytes(payload[12:44]))


def encode_model_push(weights: np.ndarray) -> bytes:
    arr = np.asarray(weights, dtype=np.float64)
    return struct.pack(">I", arr.shape[0]) + arr.astype(">f8").tobytes()


def decode_model_push(payload: bytes) -> np.ndarray:
    (dim,) = struct.unpack_from(">I", payload, 0)
    return np.frombuffer(payload, dtype=">f8", count=dim, offset=4).astype(np.float64)


def encode_round_result(result: RoundResult) -> bytes:
    vec = result.aggregate
    return (
        struct.pack(">dII", result.staleness_total, result.contributor_count, vec.dim)
        + vec.values.astype(">u4").tobytes()
    )


def decode_round_result(payload: bytes, round_id: int, modulus: int) -> RoundResult:
    staleness_total, contributors, dim = struct.unpack_from(">dII", payload, 0)
    raw = np.frombuffer(payload, dtype=">u4", count=dim, offset=16).astype(np.int64)
    return RoundResult(
        aggregate=FieldVector._wrap(raw, modulus),
        staleness_total=staleness_total,
        round_id=round_id,
        contributor_count=contributors,
    )


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass
class LoopbackEndpoint:
    """In-memory one-way frame queue against a simulated clock.

    Frames are stored encoded so the loopback path exercises the exact
    bytes the TCP path would carry. Delivery happens at send_time plus the
    injected latency; receive(now) only surfaces frames whose delivery
    time has arrived, in FIFO order per delivery time.
    """

    latency: float = 0.0
    _queue: list = dc_field(default_factory=list)
    _seq: int = 0

    def deliver(self, frame: Frame, now: float = 0.0, latency: float | None = None) -> None:
        lat = self.latency if latency is None else latency
        heapq.heappush(self._queue, (now + lat, self._seq, encode_frame(frame)))
        self._seq += 1

    def receive(self, now: float | None = None) -> Frame | None:
        if not self._queue:
            return None
        due, _, raw = self._queue[0]
        if now is not None and due > now:
            return None
        heapq.heappop(self._queue)
        frame, _ = decode_frame(raw)
        return frame

    def next_delivery(self) -> float | None:
        return self._queue[0][0] if self._queue else None

    def __len__(self) -> int:
        return len(self._queue)


class LoopbackConn:
    """Bidirectional pair of loopback endpoints with a blocking-style API.

    Mirrors the tiny subset of socket behaviour the sessions need: send a
    frame, receive the next frame. Used to drive a full protocol round
    in-process over the same codecs as TCP.
    """

    def __init__(self, inbox: LoopbackEndpoint, outbox: LoopbackEndpoint):
        self._inbox = inbox
        self._outbox = outbox

    @classmethod
    def pair(cls) -> tuple["LoopbackConn", "LoopbackConn"]:
        a_to_b = LoopbackEndpoint()
        b_to_a = LoopbackEndpoint()
        return cls(b_to_a, a_to_b), cls(a_to_b, b_to_a)

    def send(self, frame: Frame) -> None:
        self._outbox.deliver(frame)

    def recv(self) -> Frame:
        frame = self._inbox.receive()
        if frame is None:
            raise IncompleteFrame("loopback peer sent nothing")
        return frame


def send_frame(sock, frame: Frame) -> None:
    sock.sendall(encode_frame(frame))


def recv_frame(sock) -> Frame:
    return read_frame(sock.recv)


class SocketConn:
    """Socket wrapper matching the LoopbackConn send/recv interface."""

    def __init__(self, sock):
        self.sock = sock

    def send(self, frame: Frame) -> None:
        send_frame(self.sock, frame)

    def recv(self) -> Frame:
        return recv_frame(self.sock)

    def close(self) -> None:
        self.sock.close()
