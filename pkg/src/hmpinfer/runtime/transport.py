"""Framed byte-stream links with optional sender-side bandwidth pacing.

Wire format of one frame (all integers little-endian)::

    offset  size  field
    0       4     length         u32, payload size in bytes
    4       1     kind           u8, 0=control 1=tensor-fragment 2=trace
    5       8     collective_id  u64
    13      2     origin         u16, originating rank (all-gather fragment)
                                 or segment index (reduce-scatter partial)
    15      2     step           u16, ring step within the collective
    17      ...   payload

Control and trace payloads are UTF-8 JSON. Tensor payloads are raw
little-endian row-major element bytes; the shape is implied by the
collective (or announced in a preceding control frame).
"""
from __future__ import annotations

import json
import socket
import struct
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..errors import PeerDisconnected, PeerTimeout, ProtocolError

HEADER = struct.Struct("<IBQHH")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 30
BUCKET_BYTES = 64 * 1024
CHUNK_BYTES = 16 * 1024
DEFAULT_TIMEOUT = 10.0


class FrameKind(IntEnum):
    CONTROL = 0
    TENSOR = 1
    TRACE = 2


@dataclass
class Frame:
    kind: FrameKind
    payload: bytes = b""
    collective_id: int = 0
    origin: int = 0
    step: int = 0

    def encode(self) -> bytes:
        return self.header() + bytes(self.payload)

    def header(self) -> bytes:
        return HEADER.pack(len(self.payload), int(self.kind), self.collective_id, self.origin, self.step)

    @classmethod
    def decode(cls, buf: bytes) -> "Frame":
        if len(buf) < HEADER_SIZE:
            raise ProtocolError(f"frame shorter than header: {len(buf)} bytes")
        length, kind, cid, origin, step = HEADER.unpack_from(buf)
        if len(buf) - HEADER_SIZE != length:
            raise ProtocolError(f"frame length field {length} but {len(buf) - HEADER_SIZE} payload bytes")
        return cls(FrameKind(kind), bytes(buf[HEADER_SIZE:]), cid, origin, step)

    # convenience constructors / accessors

    @classmethod
    def control(cls, obj: dict) -> "Frame":
        return cls(FrameKind.CONTROL, json.dumps(obj).encode())

    @classmethod
    def trace(cls, obj: dict) -> "Frame":
        return cls(FrameKind.TRACE, json.dumps(obj).encode())

    @classmethod
    def tensor(cls, arr: np.ndarray, collective_id: int = 0, origin: int = 0, step: int = 0) -> "Frame":
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        return cls(FrameKind.TENSOR, data, collective_id, origin, step)

    def json(self) -> dict:
        if self.kind == FrameKind.TENSOR:
            raise ProtocolError("expected a control/trace frame, got a tensor fragment")
        return json.loads(self.payload)

    def array(self, rows: int, cols: int, dtype) -> np.ndarray:
        dt = np.dtype(dtype)
        if self.kind != FrameKind.TENSOR:
            raise ProtocolError(f"expected a tensor fragment, got {self.kind.name}")
        if len(self.payload) != rows * cols * dt.itemsize:
            raise ProtocolError(
                f"fragment carries {len(self.payload)} bytes, expected {rows}x{cols} {dt.name}"
            )
        return np.frombuffer(self.payload, dtype=dt.newbyteorder("<")).astype(dt).reshape(rows, cols)


class TokenBucket:
    """Blocking token bucket measured in bytes."""

    def __init__(self, rate_bytes: float, capacity: int = BUCKET_BYTES):
        if not rate_bytes > 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate_bytes)
        self.capacity = capacity
        self._tokens = float(capacity)
        self._ts = time.monotonic()
        self._lock = threading.Lock()

    def consume(self, n: int) -> None:
        if n > self.capacity:
            raise ValueError(f"cannot consume {n} bytes from a {self.capacity}-byte bucket")
        with self._lock:
            while True:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._ts) * self.rate)
                self._ts = now
                if self._tokens >= n:
                    self._tokens -= n
                    return
                time.sleep((n - self._tokens) / self.rate)


class Link:
    """One ordered, framed, bidirectional byte stream to a peer.

    ``bandwidth_limit`` is in bits per second (``None`` for unlimited) and
    paces outbound bytes only. ``post_send``/``post_recv`` run on private
    single-thread executors so transfers progress while the caller computes;
    ordering on the link is preserved.
    """

    def __init__(self, sock: socket.socket, peer: int | None = None,
                 bandwidth_limit: float | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.sock = sock
        self.peer = peer
        self.timeout = timeout
        self.bandwidth_limit = bandwidth_limit
        self.bucket = TokenBucket(bandwidth_limit / 8.0) if bandwidth_limit else None
        sock.settimeout(timeout)
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.bytes_sent = {k: 0 for k in FrameKind}
        self.bytes_recv = {k: 0 for k in FrameKind}
        self._send_pool: ThreadPoolExecutor | None = None
        self._recv_pool: ThreadPoolExecutor | None = None
        self._closed = False

    def __repr__(self) -> str:
        return f"Link(peer={self.peer}, limit={self.bandwidth_limit})"

    # -- blocking API

    def send(self, frame: Frame) -> None:
        try:
            self._write(frame.header())
            self._write(memoryview(frame.payload))
        except socket.timeout as e:
            raise PeerTimeout(f"send to rank {self.peer} timed out after {self.timeout}s", self.peer) from e
        except OSError as e:
            raise PeerDisconnected(f"send to rank {self.peer} failed: {e}", self.peer) from e
        self.bytes_sent[frame.kind] += len(frame.payload)

    def recv(self, timeout: float | None = None) -> Frame:
        try:
            if timeout is not None:
                self.sock.settimeout(timeout)
            header = self._read(HEADER_SIZE)
            length, kind, cid, origin, step = HEADER.unpack(header)
            if length > MAX_PAYLOAD:
                raise ProtocolError(f"frame from rank {self.peer} claims {length} bytes")
            payload = self._read(length)
        except socket.timeout as e:
            raise PeerTimeout(f"no data from rank {self.peer} within {self.sock.gettimeout()}s", self.peer) from e
        except OSError as e:
            raise PeerDisconnected(f"link to rank {self.peer} failed: {e}", self.peer) from e
        finally:
            if timeout is not None and not self._closed:
                try:
                    self.sock.settimeout(self.timeout)
                except OSError:
                    pass
        try:
            kind = FrameKind(kind)
        except ValueError:
            raise ProtocolError(f"unknown frame kind {kind} from rank {self.peer}") from None
        self.bytes_recv[kind] += length
        return Frame(kind, payload, cid, origin, step)

    # -- asynchronous API

    def post_send(self, frame: Frame) -> Future:
        if self._send_pool is None:
            self._send_pool = ThreadPoolExecutor(1, thread_name_prefix=f"send-{self.peer}")
        return self._send_pool.submit(self.send, frame)

    def post_recv(self) -> Future:
        if self._recv_pool is None:
            self._recv_pool = ThreadPoolExecutor(1, thread_name_prefix=f"recv-{self.peer}")
        return self._recv_pool.submit(self.recv)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        for pool in (self._send_pool, self._recv_pool):
            if pool is not None:
                pool.shutdown(wait=False, cancel_futures=True)

    @property
    def closed(self) -> bool:
        return self._closed

    # -- internals

    def _write(self, data) -> None:
        if self.bucket is None:
            self.sock.sendall(data)
            return
        view = memoryview(data).cast("B")
        for off in range(0, len(view), CHUNK_BYTES):
            chunk = view[off : off + CHUNK_BYTES]
            self.bucket.consume(len(chunk))
            self.sock.sendall(chunk)

    def _read(self, n: int) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            k = self.sock.recv_into(view[got:], n - got)
            if k == 0:
                raise PeerDisconnected(f"rank {self.peer} closed the connection", self.peer)
            got += k
        return bytes(buf)


def throttled_send(link: Link, data: bytes, limit: float | None = None) -> None:
    """Send ``data`` as one control-less raw frame, paced at ``limit`` bits/s."""
    if limit is not None and limit != link.bandwidth_limit:
        link.bandwidth_limit = limit
        link.bucket = TokenBucket(limit / 8.0) if limit else None
    link.send(Frame(FrameKind.TENSOR, data))


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host:
        raise ValueError(f"address {addr!r} must be host:port")
    return host.strip("[]"), int(port)


def link_pair(limit_ab: float | None = None, limit_ba: float | None = None,
              timeout: float = DEFAULT_TIMEOUT, peers=(1, 0)) -> tuple[Link, Link]:
    """Two connected in-process links (socketpair) for threads standing in for devices."""
    a, b = socket.socketpair()
    return Link(a, peers[0], limit_ab, timeout), Link(b, peers[1], limit_ba, timeout)
