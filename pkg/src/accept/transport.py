"""Framed inter-stage messages and the links that carry them.

Frame layout (little-endian): b"EPTW", u8 type, u32 batch_id, u32 weight
version, u32 payload length, payload.  The simulated link models a FIFO
channel of fixed bandwidth; the socket link moves the same frames over TCP,
optionally paced to a target bandwidth.
"""
from __future__ import annotations

import enum
import heapq
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

MAGIC = b"EPTW"
_HEADER = struct.Struct("<4sBIII")
HEADER_BYTES = _HEADER.size  # 17
MAX_PAYLOAD = 2**32 - 1


class MsgType(enum.IntEnum):
    HELLO = 0
    FEATURES = 1
    GRADS = 2
    LATENCY_REPORT = 3
    REPARTITION = 4
    WEIGHTS_XFER = 5


class FrameError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    batch_id: int
    weight_version: int
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        for name in ("batch_id", "weight_version"):
            v = getattr(self, name)
            if not 0 <= v < 2**32:
                raise ValueError(f"{name} {v} does not fit in u32")
        if len(self.payload) > MAX_PAYLOAD:
            raise ValueError(f"payload of {len(self.payload)} bytes exceeds the u32 length field")

    @property
    def nbytes(self) -> int:
        return HEADER_BYTES + len(self.payload)


def serialize(msg: WireMessage) -> bytes:
    return _HEADER.pack(MAGIC, int(msg.msg_type), msg.batch_id, msg.weight_version, len(msg.payload)) + bytes(msg.payload)


def parse_header(data: bytes, offset: int = 0) -> tuple[MsgType, int, int, int]:
    if len(data) - offset < HEADER_BYTES:
        raise FrameError(f"truncated header: {len(data) - offset} of {HEADER_BYTES} bytes", offset + max(len(data) - offset, 0))
    magic, mtype, batch_id, version, length = _HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}", offset)
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise FrameError(f"unknown message type {mtype}", offset + 4) from None
    return mtype, batch_id, version, length


def deserialize(data: bytes) -> WireMessage:
    """Inverse of :func:`serialize`; the buffer must hold exactly one frame."""
    msg, end = deserialize_from(data, 0)
    if end != len(data):
        raise FrameError(f"{len(data) - end} trailing bytes after frame", end)
    return msg


def deserialize_from(data: bytes, offset: int) -> tuple[WireMessage, int]:
    """Decode the frame starting at ``offset``; returns the message and the end offset."""
    mtype, batch_id, version, length = parse_header(data, offset)
    start = offset + HEADER_BYTES
    if len(data) - start < length:
        raise FrameError(f"truncated payload: header says {length} bytes, {len(data) - start} present", len(data))
    return WireMessage(mtype, batch_id, version, bytes(data[start:start + length])), start + length


# -- simulated link ----------------------------------------------------------------


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bps: float
    base_latency_ms: float = 0.0
    in_order: bool = True

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth_bps}")
        if self.base_latency_ms < 0:
            raise ValueError("base latency must be non-negative")
        if not self.in_order:
            raise ValueError("only in-order links are modelled")

    def transfer_ms(self, nbytes: int) -> float:
        return nbytes * 8 / self.bandwidth_bps * 1000

    def delivery_ms(self, nbytes: int) -> float:
        return self.base_latency_ms + self.transfer_ms(nbytes)


@dataclass(order=True)
class Delivery:
    time_ms: float
    seq: int
    msg: WireMessage = field(compare=False)
    sent_ms: float = field(compare=False, default=0.0)
    start_ms: float = field(compare=False, default=0.0)
    tag: object = field(compare=False, default=None)


class SimulatedLink:
    """FIFO channel on a caller-owned clock.

    A message occupies the channel for its transfer time; one sent while the
    channel is busy waits.  Delivery happens ``base_latency_ms`` after the last
    byte leaves.  The link never advances time itself.
    """

    def __init__(self, model: LinkModel, name: str = "link"):
        self.model = model
        self.name = name
        self.busy_until = 0.0
        self.bytes_sent = 0
        self.busy_ms = 0.0
        self._seq = 0
        self._inflight: list[Delivery] = []
        self._keys: set = set()

    def send(self, msg: WireMessage, now_ms: float, tag=None) -> Delivery:
        key = (msg.msg_type, msg.batch_id, tag)
        if key in self._keys:
            raise ValueError(f"{self.name}: {msg.msg_type.name} for batch {msg.batch_id} already in flight")
        nbytes = len(serialize(msg))
        start = max(now_ms, self.busy_until)
        xfer = self.model.transfer_ms(nbytes)
        self.busy_until = start + xfer
        self.busy_ms += xfer
        self.bytes_sent += nbytes
        d = Delivery(self.busy_until + self.model.base_latency_ms, self._seq, msg, now_ms, start, tag)
        self._seq += 1
        heapq.heappush(self._inflight, d)
        self._keys.add(key)
        return d

    def next_delivery_ms(self) -> Optional[float]:
        return self._inflight[0].time_ms if self._inflight else None

    def receive(self, now_ms: float) -> list[Delivery]:
        """Pop every message delivered by ``now_ms``, in send order."""
        out = []
        while self._inflight and self._inflight[0].time_ms <= now_ms:
            d = heapq.heappop(self._inflight)
            self._keys.discard((d.msg.msg_type, d.msg.batch_id, d.tag))
            out.append(d)
        return out

    @property
    def in_flight(self) -> int:
        return len(self._inflight)


# -- TCP link -------------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 16))
        if not chunk:
            raise ConnectionError(f"peer closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> WireMessage:
    header = _recv_exact(sock, HEADER_BYTES)
    _, _, _, length = parse_header(header)
    return deserialize(header + _recv_exact(sock, length))


class SocketLink:
    """One end of a TCP connection carrying frames.

    ``send`` queues onto a bounded outbox drained by a writer thread; a reader
    thread decodes incoming frames into ``inbox`` in arrival order.  With
    ``bandwidth_bps`` set, the writer paces itself so a frame of B bytes takes
    about B * 8 / bandwidth seconds to leave.
    """

    CHUNK = 16 * 1024

    def __init__(self, sock: socket.socket, bandwidth_bps: float | None = None, outbox_size: int = 64):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.bandwidth_bps = bandwidth_bps
        self.inbox: "queue.Queue[tuple[float, WireMessage]]" = queue.Queue()
        self._outbox: "queue.Queue[Optional[bytes]]" = queue.Queue(maxsize=outbox_size)
        self._closed = threading.Event()
        self.error: Optional[BaseException] = None
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._writer.start()
        self._reader.start()

    @classmethod
    def connect(cls, host: str, port: int, **kw) -> "SocketLink":
        return cls(socket.create_connection((host, port)), **kw)

    @staticmethod
    def listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        return srv

    @classmethod
    def accept(cls, server: socket.socket, **kw) -> "SocketLink":
        conn, _ = server.accept()
        return cls(conn, **kw)

    def send(self, msg: WireMessage, timeout: float | None = None) -> None:
        if self._closed.is_set():
            raise ConnectionError("link is closed")
        self._outbox.put(serialize(msg), timeout=timeout)

    def recv(self, timeout: float | None = None) -> WireMessage:
        return self.recv_timed(timeout)[1]

    def recv_timed(self, timeout: float | None = None) -> tuple[float, WireMessage]:
        """(perf_counter time the frame was fully read, message)."""
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            if self.error is not None:
                raise ConnectionError(f"link failed: {self.error}") from self.error
            raise

    def _write_loop(self):
        try:
            while True:
                frame = self._outbox.get()
                if frame is None:
                    return
                if not self.bandwidth_bps:
                    self.sock.sendall(frame)
                    continue
                t0 = time.perf_counter()
                for off in range(0, len(frame), self.CHUNK):
                    chunk = frame[off:off + self.CHUNK]
                    # a chunk leaves once the channel would have finished clocking it out
                    delay = t0 + (off + len(chunk)) * 8 / self.bandwidth_bps - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
                    self.sock.sendall(chunk)
        except OSError as exc:
            if not self._closed.is_set():
                self.error = exc

    def _read_loop(self):
        try:
            while not self._closed.is_set():
                msg = read_frame(self.sock)
                self.inbox.put((time.perf_counter(), msg))
        except (OSError, ConnectionError, FrameError) as exc:
            if not self._closed.is_set():
                self.error = exc

    def close(self):
        self._outbox.put(None)
        self._writer.join(timeout=5)
        self._closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._reader.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
