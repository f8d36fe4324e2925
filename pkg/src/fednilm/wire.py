"""Networked federation: a synchronous parameter server over framed TCP.

Every message is [u32 big-endian payload length][u8 type][payload]; payload
integers and floats are little-endian.  Parameter vectors travel as raw f32
in canonical layout order.  The message grammar has no type that can carry
raw consumption data, so the privacy property of the protocol is structural.
"""

from __future__ import annotations

import hashlib
import socket
import struct
import threading
import time
from dataclasses import replace

import numpy as np

from .federation import (
    ClientState,
    FederationConfig,
    FederationError,
    RoundReport,
    fedavg,
    households_update,
)
from .model import ModelConfig, NilmModel
from .tensor import ParamVector

PROTOCOL_MAGIC = b"FNLM"
PROTOCOL_VERSION = 1

MSG_HELLO = 0x01
MSG_WELCOME = 0x02
MSG_GLOBAL_PARAMS = 0x03
MSG_LOCAL_UPDATE = 0x04
MSG_ROUND_ABORT = 0x05
MSG_DONE = 0x06

FRAME_OVERHEAD = 5  # u32 length prefix + u8 type


class ProtocolError(FederationError):
    """Handshake or framing violation."""


class ConnectionClosed(ProtocolError):
    """The peer went away mid-conversation."""


def effective_model_config(config: FederationConfig, model_config: ModelConfig) -> ModelConfig:
    """The model configuration both sides actually train with."""
    return replace(model_config, init_seed=config.global_seed, dropout_p=config.dropout)


def config_hash(config: FederationConfig, model_config: ModelConfig) -> int:
    """64-bit digest over every numerically relevant configuration field."""
    eff = effective_model_config(config, model_config)
    canonical = repr((
        config.n_clients, config.global_rounds, config.local_epochs,
        config.local_batch, config.global_batch, config.eta, config.rho,
        config.dropout, config.global_seed, tuple(config.client_seeds),
        eff.window_len, eff.appliance_count, tuple(eff.encoder_channels),
        tuple(eff.downsample_factors), eff.pool_branch_count,
        eff.branch_channels, eff.decoder_channels, eff.dropout_p, eff.init_seed,
    ))
    digest = hashlib.sha256(canonical.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class FramedConnection:
    """Length-prefixed message stream over a socket, with byte accounting.

    An optional `tap` callable observes every raw chunk in both directions,
    and an optional `frame_log` list collects (direction, type, payload-size)
    triples; the traffic-capture tests use them to audit what actually
    crosses the wire.
    """

    def __init__(self, sock: socket.socket, tap=None, frame_log: list | None = None):
        self.sock = sock
        self.tap = tap
        self.frame_log = frame_log
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, mtype: int, payload: bytes) -> None:
        frame = struct.pack(">I", len(payload)) + bytes([mtype]) + payload
        self.sock.sendall(frame)
        self.bytes_sent += len(frame)
        if self.tap:
            self.tap(frame)
        if self.frame_log is not None:
            self.frame_log.append(("send", mtype, len(payload)))

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self.sock.recv(remaining)
            if not chunk:
                raise ConnectionClosed("peer closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        data = b"".join(chunks)
        self.bytes_received += n
        if self.tap:
            self.tap(data)
        return data

    def recv(self) -> tuple[int, bytes]:
        header = self._recv_exact(4)
        (length,) = struct.unpack(">I", header)
        mtype = self._recv_exact(1)[0]
        payload = self._recv_exact(length) if length else b""
        if self.frame_log is not None:
            self.frame_log.append(("recv", mtype, length))
        return mtype, payload

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# -- message payloads ---------------------------------------------------------


def pack_hello(client_id: int, chash: int) -> bytes:
    return PROTOCOL_MAGIC + struct.pack("<HIQ", PROTOCOL_VERSION, client_id, chash)


def unpack_hello(payload: bytes) -> tuple[bytes, int, int, int]:
    if len(payload) != 4 + struct.calcsize("<HIQ"):
        raise ProtocolError(f"malformed HELLO of {len(payload)} bytes")
    magic = payload[:4]
    version, client_id, chash = struct.unpack_from("<HIQ", payload, 4)
    return magic, version, client_id, chash


def pack_welcome(index: int, n: int, rounds: int, epochs: int) -> bytes:
    return struct.pack("<IIII", index, n, rounds, epochs)


def unpack_welcome(payload: bytes) -> tuple[int, int, int, int]:
    return struct.unpack("<IIII", payload)


def pack_global_params(round_index: int, values: np.ndarray) -> bytes:
    out = values.astype("<f4", copy=False)
    return struct.pack("<II", round_index, out.size) + out.tobytes()


def unpack_global_params(payload: bytes) -> tuple[int, np.ndarray]:
    round_index, count = struct.unpack_from("<II", payload, 0)
    values = np.frombuffer(payload, dtype="<f4", count=count, offset=8)
    if len(payload) != 8 + 4 * count:
        raise ProtocolError("GLOBAL_PARAMS length disagrees with its count field")
    return round_index, values


def pack_local_update(round_index: int, client_id: int, values: np.ndarray, loss: float) -> bytes:
    out = values.astype("<f4", copy=False)
    return (
        struct.pack("<III", round_index, client_id, out.size)
        + out.tobytes()
        + struct.pack("<f", loss)
    )


def unpack_local_update(payload: bytes) -> tuple[int, int, np.ndarray, float]:
    round_index, client_id, count = struct.unpack_from("<III", payload, 0)
    if len(payload) != 12 + 4 * count + 4:
        raise ProtocolError("LOCAL_UPDATE length disagrees with its count field")
    values = np.frombuffer(payload, dtype="<f4", count=count, offset=12)
    (loss,) = struct.unpack_from("<f", payload, 12 + 4 * count)
    return round_index, client_id, values, loss


def pack_abort(round_index: int, reason: str) -> bytes:
    return struct.pack("<I", round_index) + reason.encode("utf-8")


def unpack_abort(payload: bytes) -> tuple[int, str]:
    (round_index,) = struct.unpack_from("<I", payload, 0)
    return round_index, payload[4:].decode("utf-8")


# -- server -------------------------------------------------------------------


def serve(
    config: FederationConfig,
    model_config: ModelConfig,
    bind: tuple[str, int],
    timeout_s: float = 120.0,
    tap=None,
    ready_event: threading.Event | None = None,
) -> tuple[ParamVector, list[RoundReport]]:
    """Run the full federation as the parameter server.

    Registers exactly `n_clients` households (extra or invalid registrations
    are refused), then executes the synchronous rounds: broadcast, barrier on
    all local updates, average.  Any mid-round failure aborts the round with
    a broadcast diagnostic.  Returns the final parameters and per-round
    reports with real per-client byte counts.
    """
    expected_hash = config_hash(config, model_config)
    eff = effective_model_config(config, model_config)
    global_model = NilmModel(eff)

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind(bind)
    listener.listen(config.n_clients + 4)
    listener.settimeout(timeout_s)
    if ready_event is not None:
        ready_event.set()

    conns: dict[int, FramedConnection] = {}
    stop_rejecting = threading.Event()

    def reject(conn: FramedConnection, reason: str) -> None:
        try:
            conn.send(MSG_ROUND_ABORT, pack_abort(0, reason))
        except OSError:
            pass
        conn.close()

    def handshake(conn: FramedConnection) -> None:
        mtype, payload = conn.recv()
        if mtype != MSG_HELLO:
            reject(conn, f"expected HELLO, got message type {mtype:#x}")
            return
        magic, version, client_id, chash = unpack_hello(payload)
        if magic != PROTOCOL_MAGIC:
            reject(conn, f"bad magic {magic!r}")
            return
        if version != PROTOCOL_VERSION:
            reject(conn, f"unsupported protocol version {version}")
            return
        if chash != expected_hash:
            reject(conn, "config mismatch")
            return
        if client_id >= config.n_clients:
            reject(conn, f"client id {client_id} out of range for {config.n_clients} clients")
            return
        if client_id in conns:
            reject(conn, f"client id {client_id} already registered")
            return
        conn.send(
            MSG_WELCOME,
            pack_welcome(client_id, config.n_clients, config.global_rounds, config.local_epochs),
        )
        conns[client_id] = conn

    try:
        while len(conns) < config.n_clients:
            sock, _ = listener.accept()
            sock.settimeout(timeout_s)
            handshake(FramedConnection(sock, tap=tap))

        def rejector() -> None:
            while not stop_rejecting.is_set():
                try:
                    sock, _ = listener.accept()
                except (OSError, socket.timeout):
                    return
                sock.settimeout(timeout_s)
                reject(FramedConnection(sock, tap=tap), "server full")

        threading.Thread(target=rejector, daemon=True).start()

        reports: list[RoundReport] = []
        global_params = global_model.flatten_params()
        layout = global_params.layout
        ordered_ids = sorted(conns)
        for r in range(1, config.global_rounds + 1):
            t0 = time.perf_counter()
            sent_before = {cid: conns[cid].bytes_sent for cid in ordered_ids}
            recv_before = {cid: conns[cid].bytes_received for cid in ordered_ids}
            try:
                frame = pack_global_params(r, global_params.values)
                for cid in ordered_ids:
                    conns[cid].send(MSG_GLOBAL_PARAMS, frame)
                updates: list[tuple[int, ParamVector]] = []
                losses: dict[int, float] = {}
                for cid in ordered_ids:
                    mtype, payload = conns[cid].recv()
                    if mtype != MSG_LOCAL_UPDATE:
                        raise ProtocolError(
                            f"client {cid}: expected LOCAL_UPDATE, got type {mtype:#x}"
                        )
                    rr, sender, values, loss = unpack_local_update(payload)
                    if rr != r or sender != cid:
                        raise ProtocolError(
                            f"client {cid}: update for round {rr} from sender {sender}"
                        )
                    if values.size != global_model.param_count:
                        raise ProtocolError(
                            f"client {cid}: {values.size} parameters, expected "
                            f"{global_model.param_count}"
                        )
                    updates.append((cid, ParamVector(values.copy())))
                    losses[cid] = float(loss)
            except (OSError, ProtocolError) as exc:
                reason = f"round {r} aborted: {exc}"
                for cid in ordered_ids:
                    try:
                        conns[cid].send(MSG_ROUND_ABORT, pack_abort(r, reason))
                    except OSError:
                        pass
                raise FederationError(reason) from exc
            averaged = fedavg(updates)
            global_params = ParamVector(averaged.values, layout)
            global_model.load_params(global_params)
            reports.append(
                RoundReport(
                    round_index=r,
                    client_losses=losses,
                    wall_time_s=time.perf_counter() - t0,
                    bytes_up={
                        cid: conns[cid].bytes_received - recv_before[cid] for cid in ordered_ids
                    },
                    bytes_down={
                        cid: conns[cid].bytes_sent - sent_before[cid] for cid in ordered_ids
                    },
                )
            )
        done = struct.pack("<I", config.global_rounds)
        for cid in ordered_ids:
            conns[cid].send(MSG_DONE, done)
        return global_params, reports
    finally:
        stop_rejecting.set()
        listener.close()
        for conn in conns.values():
            conn.close()


# -- client -------------------------------------------------------------------


def join(
    address: tuple[str, int],
    config: FederationConfig,
    model_config: ModelConfig,
    dataset: tuple[np.ndarray, np.ndarray],
    client_id: int,
    timeout_s: float = 120.0,
    tap=None,
    frame_log: list | None = None,
) -> list[float]:
    """Participate as one household; returns the per-round mean local losses.

    Only parameter vectors and scalar losses ever leave this function: the
    local dataset stays in process.
    """
    x, y = dataset
    eff = effective_model_config(config, model_config)
    sock = socket.create_connection(address, timeout=timeout_s)
    conn = FramedConnection(sock, tap=tap, frame_log=frame_log)
    try:
        conn.send(MSG_HELLO, pack_hello(client_id, config_hash(config, model_config)))
        mtype, payload = conn.recv()
        if mtype == MSG_ROUND_ABORT:
            _, reason = unpack_abort(payload)
            raise ProtocolError(f"registration refused: {reason}")
        if mtype != MSG_WELCOME:
            raise ProtocolError(f"expected WELCOME, got message type {mtype:#x}")
        index, n_clients, rounds, epochs = unpack_welcome(payload)
        if index != client_id or n_clients != config.n_clients:
            raise ProtocolError(
                f"server assigned index {index}/{n_clients}, expected "
                f"{client_id}/{config.n_clients}"
            )
        client = ClientState(
            client_id, eff, x, y, config.client_seed(client_id), config.eta, config.rho
        )
        losses: list[float] = []
        while True:
            mtype, payload = conn.recv()
            if mtype == MSG_DONE:
                return losses
            if mtype == MSG_ROUND_ABORT:
                _, reason = unpack_abort(payload)
                raise FederationError(f"server aborted: {reason}")
            if mtype != MSG_GLOBAL_PARAMS:
                raise ProtocolError(f"unexpected message type {mtype:#x} mid-round")
            round_index, values = unpack_global_params(payload)
            pv = ParamVector(values.astype(client.model.params_buffer().dtype))
            update, mean_loss = households_update(
                client, pv, config.local_epochs, config.local_batch
            )
            conn.send(
                MSG_LOCAL_UPDATE,
                pack_local_update(round_index, client_id, update.values, mean_loss),
            )
            losses.append(mean_loss)
    finally:
        conn.close()
