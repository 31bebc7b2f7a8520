"""Client/server round protocol over a loopback or TCP carrier.

Frame layout (big-endian)::

    u32 length of everything after this field
    u8  kind tag
    u32 round
    u32 sender id (server = 0xFFFFFFFF)
    ... payload

Payloads:

    JOIN           u8 protocol version, i32 requested client id (-1 = any)
    JOIN_ACK       u8 accepted, u32 assigned client id, 32-byte config digest
    GLOBAL_MODEL   u32 P, P x f64
    CLIENT_UPDATE  u32 m, m x (u32 index, f64 delta),
                   u32 P, f64 avg_loss, u32 n_samples, u32 iterations,
                   f64 mean_loss_scale, u8 d, d x (u8 class, f64 dice)
    ROUND_DONE     empty
    SHUTDOWN       empty

No payload kind can carry images or labels.
"""

from __future__ import annotations

import enum
import hashlib
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .client import Client, RoundReport
from .param_math import SparseUpdate, UsageError
from .server import AggregationConfig, ProtocolError, Server, select_best

PROTOCOL_VERSION = 1
SERVER_ID = 0xFFFFFFFF
MAX_FRAME = 2 ** 31 - 1
HEADER = struct.Struct(">IBII")
DEFAULT_TIMEOUT = 30.0


class MessageKind(enum.IntEnum):
    JOIN = 1
    JOIN_ACK = 2
    GLOBAL_MODEL = 3
    CLIENT_UPDATE = 4
    ROUND_DONE = 5
    SHUTDOWN = 6


class EncodingError(ValueError):
    pass


class StartupError(RuntimeError):
    pass


@dataclass(frozen=True)
class JoinRequest:
    version: int = PROTOCOL_VERSION
    requested_id: int = -1


@dataclass(frozen=True)
class JoinAck:
    accepted: bool
    client_id: int
    digest: bytes = bytes(32)


@dataclass
class Message:
    kind: MessageKind
    round: int = 0
    sender_id: int = SERVER_ID
    payload: object = None

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        if (self.kind, self.round, self.sender_id) != (other.kind, other.round, other.sender_id):
            return False
        if isinstance(self.payload, np.ndarray) or isinstance(other.payload, np.ndarray):
            return np.asarray(self.payload).tobytes() == np.asarray(other.payload).tobytes()
        return self.payload == other.payload


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------


def _encode_report(r: RoundReport) -> bytes:
    u = r.update
    entries = np.empty(len(u), dtype=[("i", ">u4"), ("v", ">f8")])
    entries["i"] = u.indices
    entries["v"] = u.values
    dice = sorted(r.val_dice_per_class.items())
    parts = [
        struct.pack(">I", len(u)),
        entries.tobytes(),
        struct.pack(">IdIIdB", u.size, r.avg_loss, r.n_samples, r.iterations,
                    r.mean_loss_scale, len(dice)),
    ]
    parts += [struct.pack(">Bd", c, d) for c, d in dice]
    return b"".join(parts)


def _encode_payload(msg: Message) -> bytes:
    kind, p = msg.kind, msg.payload
    if kind == MessageKind.JOIN:
        p = p or JoinRequest()
        return struct.pack(">Bi", p.version, p.requested_id)
    if kind == MessageKind.JOIN_ACK:
        if len(p.digest) != 32:
            raise EncodingError("config digest must be 32 bytes")
        return struct.pack(">BI", int(p.accepted), p.client_id) + bytes(p.digest)
    if kind == MessageKind.GLOBAL_MODEL:
        vec = np.asarray(p, dtype=np.float64)
        if vec.ndim != 1:
            raise EncodingError("GLOBAL_MODEL payload must be a flat vector")
        return struct.pack(">I", vec.size) + vec.astype(">f8").tobytes()
    if kind == MessageKind.CLIENT_UPDATE:
        if not isinstance(p, RoundReport):
            raise EncodingError("CLIENT_UPDATE payload must be a RoundReport")
        return _encode_report(p)
    if kind in (MessageKind.ROUND_DONE, MessageKind.SHUTDOWN):
        if p not in (None, b""):
            raise EncodingError(f"{kind.name} carries no payload")
        return b""
    raise EncodingError(f"unknown message kind {kind!r}")


def encode(msg: Message) -> bytes:
    try:
        kind = MessageKind(msg.kind)
    except ValueError as exc:
        raise EncodingError(f"unknown message kind {msg.kind!r}") from exc
    if kind == MessageKind.CLIENT_UPDATE and isinstance(msg.payload, RoundReport):
        if msg.payload.client_id != msg.sender_id or msg.payload.round != msg.round:
            raise EncodingError("report identity must match the frame header")
    try:
        payload = _encode_payload(Message(kind, msg.round, msg.sender_id, msg.payload))
    except struct.error as exc:
        raise EncodingError(str(exc)) from exc
    length = HEADER.size - 4 + len(payload)
    if length > MAX_FRAME:
        raise EncodingError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    try:
        return HEADER.pack(length, kind, msg.round, msg.sender_id) + payload
    except struct.error as exc:
        raise EncodingError(str(exc)) from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.off + s.size > len(self.buf):
            raise ProtocolError("truncated payload")
        out = s.unpack_from(self.buf, self.off)
        self.off += s.size
        return out

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ProtocolError("truncated payload")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def done(self):
        if self.off != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.off} trailing payload bytes")


def _decode_payload(kind, rnd, sender, body: bytes):
    rd = _Reader(body)
    if kind == MessageKind.JOIN:
        version, requested = rd.take(">Bi")
        payload = JoinRequest(version, requested)
    elif kind == MessageKind.JOIN_ACK:
        accepted, cid = rd.take(">BI")
        payload = JoinAck(bool(accepted), cid, rd.raw(32))
    elif kind == MessageKind.GLOBAL_MODEL:
        (n,) = rd.take(">I")
        payload = np.frombuffer(rd.raw(8 * n), ">f8").astype(np.float64)
    elif kind == MessageKind.CLIENT_UPDATE:
        (m,) = rd.take(">I")
        entries = np.frombuffer(rd.raw(12 * m), dtype=[("i", ">u4"), ("v", ">f8")])
        size, avg_loss, n_samples, iterations, scale, n_dice = rd.take(">IdIIdB")
        dice = {}
        for _ in range(n_dice):
            c, d = rd.take(">Bd")
            dice[c] = d
        try:
            update = SparseUpdate(entries["i"].astype(np.int64), entries["v"].astype(np.float64), size, rnd)
            payload = RoundReport(sender, rnd, update, avg_loss, n_samples, dice, iterations, scale)
        except UsageError as exc:
            raise ProtocolError(f"invalid client update: {exc}") from exc
    else:
        payload = None
    rd.done()
    return payload


def decode(frame: bytes) -> Message:
    if len(frame) < HEADER.size:
        raise ProtocolError(f"frame of {len(frame)} bytes is shorter than the header")
    length, tag, rnd, sender = HEADER.unpack_from(frame)
    if length != len(frame) - 4:
        raise ProtocolError(f"length field {length} disagrees with frame size {len(frame)}")
    try:
        kind = MessageKind(tag)
    except ValueError as exc:
        raise ProtocolError(f"unknown message tag {tag}") from exc
    return Message(kind, rnd, sender, _decode_payload(kind, rnd, sender, frame[HEADER.size:]))


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()


# ---------------------------------------------------------------------------
# endpoints
# ---------------------------------------------------------------------------


class ClientEndpoint:
    """Client-side protocol handler wrapping a training :class:`Client`."""

    def __init__(self, client: Client, digest: bytes = bytes(32), requested_id: int | None = None,
                 version: int = PROTOCOL_VERSION):
        self.client = client
        self.digest = digest
        self.requested_id = client.client_id if requested_id is None else requested_id
        self.version = version
        self.assigned_id: int | None = None
        self.model_rounds: list[int] = []
        self.finished = False

    def start(self) -> Message:
        return Message(MessageKind.JOIN, 0, self.requested_id & 0xFFFFFFFF,
                       JoinRequest(self.version, self.requested_id))

    def handle(self, msg: Message) -> list[Message]:
        if msg.kind == MessageKind.JOIN_ACK:
            if not msg.payload.accepted:
                raise StartupError("server rejected JOIN")
            if msg.payload.digest != self.digest:
                raise StartupError("server configuration digest differs from ours")
            self.assigned_id = msg.payload.client_id
            return []
        if msg.kind == MessageKind.GLOBAL_MODEL:
            if self.assigned_id is None:
                raise ProtocolError("GLOBAL_MODEL before JOIN_ACK")
            expected = self.model_rounds[-1] + 1 if self.model_rounds else 1
            if msg.round != expected:
                raise ProtocolError(f"expected GLOBAL_MODEL round {expected}, got {msg.round}")
            self.model_rounds.append(msg.round)
            report = self.client.local_train(msg.payload, msg.round)
            return [Message(MessageKind.CLIENT_UPDATE, msg.round, report.client_id, report)]
        if msg.kind == MessageKind.ROUND_DONE:
            return []
        if msg.kind == MessageKind.SHUTDOWN:
            self.finished = True
            return []
        raise ProtocolError(f"client cannot handle {msg.kind.name}")


class FrameLog:
    """Thread-safe record of every frame that crossed a carrier."""

    def __init__(self):
        self._lock = threading.Lock()
        self.frames: list[tuple[str, bytes]] = []

    def add(self, direction: str, frame: bytes):
        with self._lock:
            self.frames.append((direction, frame))

    def tags(self) -> list[int]:
        return [f[4] for _, f in self.frames]


class LoopbackLink:
    """Server-side view of an in-process client; frames still go through the codec."""

    def __init__(self, endpoint: ClientEndpoint, log: FrameLog | None = None):
        self.endpoint = endpoint
        self.log = log
        self.inbox: deque[bytes] = deque()
        self._queue(endpoint.start())

    def _queue(self, msg):
        frame = encode(msg)
        if self.log is not None:
            self.log.add("up", frame)
        self.inbox.append(frame)

    def send(self, msg: Message):
        frame = encode(msg)
        if self.log is not None:
            self.log.add("down", frame)
        for reply in self.endpoint.handle(decode(frame)):
            self._queue(reply)

    def recv(self) -> Message:
        if not self.inbox:
            raise ProtocolError("loopback client produced no message")
        return decode(self.inbox.popleft())

    def close(self):
        pass


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> bytes:
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", head)
    if length < HEADER.size - 4 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    return head + _recv_exact(sock, length)


class SocketLink:
    def __init__(self, sock, log: FrameLog | None = None, direction=("down", "up")):
        self.sock = sock
        self.log = log
        self.out_dir, self.in_dir = direction

    def send(self, msg: Message):
        frame = encode(msg)
        if self.log is not None:
            self.log.add(self.out_dir, frame)
        self.sock.sendall(frame)

    def recv(self) -> Message:
        frame = read_frame(self.sock)
        if self.log is not None:
            self.log.add(self.in_dir, frame)
        return decode(frame)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# federation driver
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    round: int
    client_id: int
    weight: float
    avg_loss: float
    val_dice: float
    loss_scale: float


@dataclass
class FederationResult:
    initial_params: np.ndarray
    final_params: np.ndarray
    best_round: int
    best_params: np.ndarray
    trace: list = field(default_factory=list)
    model_rounds: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, FederationResult):
            return NotImplemented
        return (
            self.initial_params.tobytes() == other.initial_params.tobytes()
            and self.final_params.tobytes() == other.final_params.tobytes()
            and self.best_round == other.best_round
            and self.best_params.tobytes() == other.best_params.tobytes()
            and self.trace == other.trace
        )


def _handshake(links, expected: int, digest: bytes):
    """JOIN/JOIN_ACK exchange; returns accepted links keyed by client id."""
    accepted = {}
    next_id = 0
    for link in links:
        msg = link.recv()
        if msg.kind != MessageKind.JOIN:
            raise ProtocolError(f"expected JOIN, got {msg.kind.name}")
        req = msg.payload
        if req.version != PROTOCOL_VERSION:
            link.send(Message(MessageKind.JOIN_ACK, 0, SERVER_ID, JoinAck(False, 0, digest)))
            link.close()
            continue
        cid = req.requested_id if req.requested_id >= 0 else next_id
        while cid in accepted:
            cid += 1
        next_id = max(next_id, cid + 1)
        accepted[cid] = link
        link.send(Message(MessageKind.JOIN_ACK, 0, SERVER_ID, JoinAck(True, cid, digest)))
    if len(accepted) < expected:
        raise StartupError(f"only {len(accepted)} of {expected} clients joined")
    return accepted


def serve(server: Server, links, digest: bytes = bytes(32)) -> list[TraceRow]:
    """Run the server side of the protocol over already-connected links."""
    cfg = server.cfg
    accepted = _handshake(links, cfg.min_clients, digest)
    trace = []
    try:
        for r in range(1, cfg.rounds + 1):
            for cid in sorted(accepted):
                accepted[cid].send(Message(MessageKind.GLOBAL_MODEL, r, SERVER_ID, server.state.global_params))
            reports = {}
            for cid in sorted(accepted):
                link = accepted[cid]
                try:
                    msg = link.recv()
                except ProtocolError:
                    link.close()
                    del accepted[cid]
                    if len(accepted) < cfg.min_clients:
                        raise
                    continue
                if msg.kind != MessageKind.CLIENT_UPDATE or msg.payload.client_id != cid:
                    raise ProtocolError(f"client {cid}: unexpected {msg.kind.name} during round {r}")
                reports[cid] = msg.payload
                server.submit(msg.payload)
            if server.round != r + 1:
                raise ProtocolError(f"round {r} closed with only {len(reports)} reports")
            weights = server.state.weight_trace[-1]
            for cid in sorted(reports):
                rep = reports[cid]
                dice = list(rep.val_dice_per_class.values())
                trace.append(TraceRow(r, cid, weights[cid], rep.avg_loss,
                                      float(np.mean(dice)) if dice else float("nan"),
                                      rep.mean_loss_scale))
            for cid in sorted(accepted):
                accepted[cid].send(Message(MessageKind.ROUND_DONE, r, SERVER_ID))
    finally:
        for cid in sorted(accepted):
            try:
                accepted[cid].send(Message(MessageKind.SHUTDOWN, cfg.rounds, SERVER_ID))
            except OSError:
                pass
    return trace


def join(endpoint: ClientEndpoint, sock, log: FrameLog | None = None):
    """Client side of the socket protocol; returns when the server shuts down."""
    link = SocketLink(sock, log, direction=("up", "down"))
    link.send(endpoint.start())
    while not endpoint.finished:
        for reply in endpoint.handle(link.recv()):
            link.send(reply)


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def accept_clients(listener, n: int, timeout: float, log=None) -> list[SocketLink]:
    listener.settimeout(timeout)
    links = []
    try:
        while len(links) < n:
            conn, _ = listener.accept()
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            links.append(SocketLink(conn, log))
    except socket.timeout as exc:
        for link in links:
            link.close()
        raise StartupError(f"handshake timeout: {len(links)} of {n} clients connected") from exc
    return links


def _result(server: Server, initial, trace, endpoints) -> FederationResult:
    if server.state.completed_rounds == 0:
        best_round, best = 0, server.state.global_params.copy()
    else:
        best_round, best = select_best(server.state)
    return FederationResult(
        initial_params=np.array(initial, dtype=np.float64),
        final_params=server.state.global_params.copy(),
        best_round=best_round,
        best_params=best,
        trace=trace,
        model_rounds={ep.client.client_id: list(ep.model_rounds) for ep in endpoints},
    )


def run_federation(server_cfg: AggregationConfig, clients: list[Client], initial_params,
                   carrier: str = "loopback", digest: bytes = bytes(32),
                   listen: str = "127.0.0.1:0", timeout: float = DEFAULT_TIMEOUT,
                   log: FrameLog | None = None) -> FederationResult:
    """Run ``server_cfg.rounds`` synchronous rounds over the chosen carrier."""
    if len(clients) < server_cfg.min_clients:
        raise UsageError(f"{len(clients)} clients but min_clients={server_cfg.min_clients}")
    server = Server(server_cfg, initial_params)
    endpoints = [ClientEndpoint(c, digest) for c in clients]

    if carrier == "loopback":
        links = [LoopbackLink(ep, log) for ep in endpoints]
        trace = serve(server, links, digest)
        return _result(server, initial_params, trace, endpoints)
    if carrier != "socket":
        raise UsageError(f"unknown carrier {carrier!r}")

    host, port = parse_address(listen)
    listener = socket.create_server((host, port))
    address = listener.getsockname()[:2]
    errors = []

    def client_main(ep):
        try:
            with socket.create_connection(address, timeout=timeout) as sock:
                sock.settimeout(None)
                join(ep, sock)
        except BaseException as exc:  # surfaced in the caller
            errors.append(exc)

    # deterministic mode: connect in config order so ids follow the config
    threads = []
    links = []
    try:
        listener.settimeout(timeout)
        for ep in endpoints:
            t = threading.Thread(target=client_main, args=(ep,), daemon=True)
            t.start()
            threads.append(t)
            links += accept_clients(listener, 1, timeout, log)
        trace = serve(server, links, digest)
    finally:
        for t in threads:
            t.join(timeout)
        for link in links:
            link.close()
        listener.close()
    if errors:
        raise errors[0]
    return _result(server, initial_params, trace, endpoints)
