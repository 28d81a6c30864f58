"""Live-wire proof of the transport contract.

Runs one real aggregation round twice with the same seed: once over
localhost TCP with the server and key authority listening on real sockets
and each user in its own OS process, and once in-process over the loopback
byte transport. Both paths use the same frame codecs, the same
deterministic substreams and the same authority key material, so the
upload payloads and the unmasked aggregate must match byte for byte.

Users derive their update and randomness from the slot they are granted,
which makes the outcome independent of the order in which the user
processes happen to reach the server.
"""

from __future__ import annotations

import hashlib
import multiprocessing as mp
import socket
import threading
import time

import numpy as np

from .field import QuantizerConfig, dequantize
from .protocol import ServerEngine, user_run
from .training import StalenessFn, substream
from .transport import (
    Frame,
    FramingError,
    LoopbackConn,
    MSG_AA_KEY_REQ,
    MSG_AA_KEY_RESP,
    MSG_AA_REJECT,
    MSG_CONNECT,
    MSG_SLOT_GRANT,
    MSG_UPLOAD,
    SocketConn,
    decode_key_request,
    decode_key_response,
    decode_slot_grant,
    decode_upload,
    encode_key_request,
    encode_key_response,
    encode_slot_grant,
    encode_upload,
)
from .vault import (
    AttributeAuthority,
    AuthorityRejected,
    MasterKey,
    PublicParams,
    SYSTEM_ID_BYTES,
)

AA_REJECT_REASONS = {1: "stale round", 2: "slot not granted to requester"}
AA_REASON_CODES = {v: k for k, v in AA_REJECT_REASONS.items()}


def _demo_materials(seed: int, aa_endpoint: str) -> tuple[PublicParams, MasterKey]:
    rng = substream(seed, "demo-system")
    pp = PublicParams(system_id=rng.bytes(SYSTEM_ID_BYTES), aa_endpoint=aa_endpoint)
    mk = MasterKey(secret=rng.bytes(32))
    return pp, mk


def _demo_update(seed: int, slot: int, dim: int) -> np.ndarray:
    return substream(seed, "demo-update", slot).normal(size=dim) * 0.05


def _run_user_side(conn, aa, pp: PublicParams, seed: int, dim: int, cfg: QuantizerConfig):
    """User half of a session over any conn with send/recv of frames."""
    conn.send(Frame(MSG_CONNECT, 0))
    gframe = conn.recv()
    if gframe.msg_type != MSG_SLOT_GRANT:
        raise RuntimeError(f"expected slot grant, got type {gframe.msg_type}")
    grant = decode_slot_grant(gframe.payload, gframe.round_id)
    update = _demo_update(seed, grant.slot, dim)
    msg, _ = user_run(
        update,
        0,
        grant,
        aa,
        pp,
        cfg,
        StalenessFn.polynomial(),
        rng=substream(seed, "demo-mask", grant.slot),
        quant_rng=substream(seed, "demo-quant", grant.slot),
    )
    conn.send(Frame(MSG_UPLOAD, grant.round_id, encode_upload(msg)))


def _serve_session(conn, engine: ServerEngine) -> tuple[int, bytes, object]:
    """Server half: grant a slot, take the upload; returns (slot, payload, result)."""
    frame = conn.recv()
    if frame.msg_type != MSG_CONNECT:
        raise RuntimeError(f"expected connect, got type {frame.msg_type}")
    grant = engine.on_connect(time.monotonic())
    conn.send(Frame(MSG_SLOT_GRANT, grant.round_id, encode_slot_grant(grant)))
    uframe = conn.recv()
    if uframe.msg_type != MSG_UPLOAD:
        raise RuntimeError(f"expected upload, got type {uframe.msg_type}")
    msg = decode_upload(uframe.payload, engine.modulus)
    result = engine.on_upload(msg)
    return grant.slot, uframe.payload, result


class RemoteAuthority:
    """issue_key proxy speaking the key-request frames over TCP."""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port

    def issue_key(self, attr, token: bytes):
        with socket.create_connection((self.host, self.port), timeout=30) as sock:
            conn = SocketConn(sock)
            conn.send(Frame(MSG_AA_KEY_REQ, attr.round_id, encode_key_request(attr, token)))
            resp = conn.recv()
        if resp.msg_type == MSG_AA_KEY_RESP:
            return decode_key_response(resp.payload)
        if resp.msg_type == MSG_AA_REJECT:
            code = resp.payload[0] if resp.payload else 0
            raise AuthorityRejected(AA_REJECT_REASONS.get(code, "rejected"))
        raise RuntimeError(f"unexpected authority response type {resp.msg_type}")


def _aa_listener(aa: AttributeAuthority, listener: socket.socket, stop: threading.Event):
    listener.settimeout(0.2)
    while not stop.is_set():
        try:
            sock, _ = listener.accept()
        except socket.timeout:
            continue
        with sock:
            conn = SocketConn(sock)
            try:
                frame = conn.recv()
                if frame.msg_type != MSG_AA_KEY_REQ:
                    continue
                attr, token = decode_key_request(frame.payload)
                try:
                    sk = aa.issue_key(attr, token)
                    conn.send(
                        Frame(MSG_AA_KEY_RESP, attr.round_id, encode_key_response(sk))
                    )
                except AuthorityRejected as exc:
                    code = AA_REASON_CODES.get(exc.reason, 0)
                    conn.send(Frame(MSG_AA_REJECT, attr.round_id, bytes([code])))
            except OSError:
                continue


def _demo_user_proc(server_port: int, aa_port: int, system_hex: str, seed: int, dim: int,
                    modulus: int, scale: float, clip: float) -> None:
    pp = PublicParams(
        system_id=bytes.fromhex(system_hex),
        aa_endpoint=f"tcp://127.0.0.1:{aa_port}",
    )
    cfg = QuantizerConfig(modulus=modulus, scale=scale, clip=clip)
    aa = RemoteAuthority("127.0.0.1", aa_port)
    with socket.create_connection(("127.0.0.1", server_port), timeout=30) as sock:
        _run_user_side(SocketConn(sock), aa, pp, seed, dim, cfg)


def _digest(payloads_by_slot: dict[int, bytes], aggregate_values: np.ndarray,
            unmasked: np.ndarray) -> str:
    h = hashlib.sha256()
    for slot in sorted(payloads_by_slot):
        h.update(payloads_by_slot[slot])
    h.update(aggregate_values.astype(">u4").tobytes())
    h.update(unmasked.astype(">f8").tobytes())
    return h.hexdigest()


def _run_loopback_round(seed: int, buffer_size: int, dim: int, cfg: QuantizerConfig) -> dict:
    pp, mk = _demo_materials(seed, "local")
    aa = AttributeAuthority(pp, mk)
    engine = ServerEngine(
        aa, buffer_size=buffer_size, dim=dim, modulus=cfg.modulus,
        token_rng=substream(seed, "demo-token"),
    )
    payloads: dict[int, bytes] = {}
    result = None
    for _ in range(buffer_size):
        server_conn, user_conn = LoopbackConn.pair()
        # loopback queues are synchronous; interleave the two halves by hand
        user_conn.send(Frame(MSG_CONNECT, 0))
        frame = server_conn.recv()
        assert frame.msg_type == MSG_CONNECT
        grant = engine.on_connect(0.0)
        server_conn.send(Frame(MSG_SLOT_GRANT, grant.round_id, encode_slot_grant(grant)))
        gframe = user_conn.recv()
        decoded = decode_slot_grant(gframe.payload, gframe.round_id)
        update = _demo_update(seed, decoded.slot, dim)
        msg, _ = user_run(
            update, 0, decoded, aa, pp, cfg, StalenessFn.polynomial(),
            rng=substream(seed, "demo-mask", decoded.slot),
            quant_rng=substream(seed, "demo-quant", decoded.slot),
        )
        user_conn.send(Frame(MSG_UPLOAD, decoded.round_id, encode_upload(msg)))
        uframe = server_conn.recv()
        payloads[decoded.slot] = uframe.payload
        result = engine.on_upload(decode_upload(uframe.payload, engine.modulus))
    unmasked = dequantize(result.aggregate, cfg, result.staleness_total)
    return {
        "digest": _digest(payloads, result.aggregate.values, unmasked),
        "aggregate": unmasked,
        "staleness_total": result.staleness_total,
    }


def run_demo(buffer_size: int = 3, dim: int = 100, seed: int = 1,
             cfg: QuantizerConfig | None = None, join_timeout: float = 120.0) -> dict:
    """One round over TCP plus its loopback twin; returns the comparison."""
    if cfg is None:
        cfg = QuantizerConfig()
    loopback = _run_loopback_round(seed, buffer_size, dim, cfg)

    server_listener = socket.socket()
    server_listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server_listener.bind(("127.0.0.1", 0))
    server_listener.listen(buffer_size)
    server_port = server_listener.getsockname()[1]

    aa_listener_sock = socket.socket()
    aa_listener_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    aa_listener_sock.bind(("127.0.0.1", 0))
    aa_listener_sock.listen(8)
    aa_port = aa_listener_sock.getsockname()[1]

    pp, mk = _demo_materials(seed, f"tcp://127.0.0.1:{aa_port}")
    aa = AttributeAuthority(pp, mk)
    engine = ServerEngine(
        aa, buffer_size=buffer_size, dim=dim, modulus=cfg.modulus,
        token_rng=substream(seed, "demo-token"),
    )

    stop = threading.Event()
    aa_thread = threading.Thread(
        target=_aa_listener, args=(aa, aa_listener_sock, stop), daemon=True
    )
    aa_thread.start()

    payloads: dict[int, bytes] = {}
    results: list = []
    errors: list = []

    def server_loop():
        server_listener.settimeout(join_timeout)
        attempts = 0
        try:
            while not results and attempts < 4 * buffer_size:
                attempts += 1
                sock, _ = server_listener.accept()
                with sock:
                    try:
                        slot, payload, result = _serve_session(SocketConn(sock), engine)
                    except (FramingError, OSError):
                        # dead session counts like a timeout: slot stays free
                        engine.abort_pending()
                        continue
                    payloads[slot] = payload
                    if result is not None:
                        results.append(result)
        except Exception as exc:  # surfaced to the caller after join
            errors.append(exc)

    server_thread = threading.Thread(target=server_loop, daemon=True)
    server_thread.start()

    ctx = mp.get_context("spawn")
    procs = [
        ctx.Process(
            target=_demo_user_proc,
            args=(server_port, aa_port, pp.system_id.hex(), seed, dim,
                  cfg.modulus, cfg.scale, cfg.clip),
        )
        for _ in range(buffer_size)
    ]
    for p in procs:
        p.start()
    for p in procs:
        p.join(timeout=join_timeout)
        if p.is_alive():
            p.terminate()
            errors.append(RuntimeError("demo user process hung"))
        elif p.exitcode != 0:
            errors.append(RuntimeError(f"demo user process exited {p.exitcode}"))
    server_thread.join(timeout=join_timeout)
    stop.set()
    aa_thread.join(timeout=10)
    server_listener.close()
    aa_listener_sock.close()

    if errors:
        raise errors[0]
    if not results:
        raise RuntimeError("TCP round did not commit")
    result = results[0]
    unmasked = dequantize(result.aggregate, cfg, result.staleness_total)
    tcp_digest = _digest(payloads, result.aggregate.values, unmasked)
    return {
        "mode": "demo-tcp",
        "buffer_size": buffer_size,
        "dim": dim,
        "seed": seed,
        "tcp_digest": tcp_digest,
        "loopback_digest": loopback["digest"],
        "match": tcp_digest == loopback["digest"],
        "staleness_total": result.staleness_total,
        "aggregate_head": [float(x) for x in unmasked[:4]],
    }
