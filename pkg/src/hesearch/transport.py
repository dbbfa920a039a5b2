"""Length-prefixed framing over byte streams.

One frame is a 4-byte big-endian payload length followed by the payload;
the length excludes the prefix itself. Frames ride on anything exposing
the small stream interface below: a TCP socket, one end of a socketpair
(the in-process transport used by tests and benchmarks), or the
fragmenting shim that dribbles one byte at a time to exercise reassembly.

One protocol session runs per connection; an orderly close at a frame
boundary is the normal end of a session.
"""

from __future__ import annotations

import os
import socket
import struct
import threading

from .errors import (
    FrameTooLargeError,
    TransportError,
    TransportTimeout,
    TruncatedStreamError,
)

DEFAULT_PORT = 7341
DEFAULT_MAX_FRAME = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0
MAX_FRAME_ENV = "HESEARCH_MAX_FRAME"


def configured_max_frame() -> int:
    raw = os.environ.get(MAX_FRAME_ENV)
    if raw is None:
        return DEFAULT_MAX_FRAME
    try:
        value = int(raw)
    except ValueError as exc:
        raise TransportError(f"{MAX_FRAME_ENV}={raw!r} is not an integer") from exc
    if value < 1:
        raise TransportError(f"{MAX_FRAME_ENV} must be positive")
    return value


class FragmentingStream:
    """Test shim: delivers reads and writes `chunk` bytes at a time."""

    def __init__(self, sock, chunk: int = 1):
        self._sock = sock
        self.chunk = chunk

    def recv(self, n: int) -> bytes:
        return self._sock.recv(min(n, self.chunk))

    def sendall(self, data) -> None:
        view = memoryview(data)
        for i in range(0, len(view), self.chunk):
            self._sock.sendall(view[i:i + self.chunk])

    def settimeout(self, value) -> None:
        self._sock.settimeout(value)

    def close(self) -> None:
        self._sock.close()


class Endpoint:
    """One side of a framed connection, with monotone traffic counters."""

    def __init__(self, stream, role: str = "client",
                 max_frame: int | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.stream = stream
        self.role = role
        self.max_frame = configured_max_frame() if max_frame is None else max_frame
        self.timeout = timeout
        self.frames_sent = 0
        self.frames_received = 0
        self.bytes_sent = 0
        self.bytes_received = 0
        self._send_lock = threading.Lock()
        stream.settimeout(timeout)

    def send_frame(self, payload: bytes) -> None:
        if len(payload) > self.max_frame:
            raise FrameTooLargeError(
                f"payload of {len(payload)} bytes exceeds max frame {self.max_frame}")
        frame = struct.pack("!I", len(payload)) + payload
        with self._send_lock:
            try:
                self.stream.sendall(frame)
            except socket.timeout as exc:
                raise TransportTimeout("send timed out") from exc
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc
            self.frames_sent += 1
            self.bytes_sent += len(frame)

    def _recv_exact(self, n: int, header: bool) -> bytes | None:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self.stream.recv(n - got)
            except socket.timeout as exc:
                raise TransportTimeout(
                    f"no data for {self.timeout}s mid-frame" if chunks or not header
                    else f"no frame within {self.timeout}s") from exc
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                if header and not chunks:
                    return None  # orderly close at a frame boundary
                raise TruncatedStreamError(
                    f"peer closed mid-frame ({got} of {n} bytes)")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv_frame(self) -> bytes | None:
        """One payload, or None when the peer closed at a frame boundary."""
        head = self._recv_exact(4, header=True)
        if head is None:
            return None
        (length,) = struct.unpack("!I", head)
        if length > self.max_frame:
            self.close()
            raise FrameTooLargeError(
                f"declared frame of {length} bytes exceeds max {self.max_frame}")
        payload = self._recv_exact(length, header=False) if length else b""
        self.frames_received += 1
        self.bytes_received += 4 + length
        return payload

    def close(self) -> None:
        try:
            self.stream.close()
        except OSError:
            pass


def pipe_endpoints(max_frame: int | None = None,
                   timeout: float = DEFAULT_TIMEOUT) -> tuple[Endpoint, Endpoint]:
    """In-process transport: both ends of a socketpair, client end first."""
    a, b = socket.socketpair()
    return (Endpoint(a, "client", max_frame, timeout),
            Endpoint(b, "server", max_frame, timeout))


def connect(host: str, port: int, max_frame: int | None = None,
            timeout: float = DEFAULT_TIMEOUT) -> Endpoint:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
    return Endpoint(sock, "client", max_frame, timeout)


class Listener:
    """Accepting socket; accept() yields server-side endpoints."""

    def __init__(self, host: str, port: int,
                 max_frame: int | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.max_frame = max_frame
        self.timeout = timeout
        try:
            self._sock = socket.create_server((host, port))
        except OSError as exc:
            raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
        self.host, self.port = self._sock.getsockname()[:2]
        self._closed = False

    def accept(self) -> Endpoint:
        try:
            conn, _addr = self._sock.accept()
        except OSError as exc:
            raise TransportError(f"accept failed: {exc}") from exc
        return Endpoint(conn, "server", self.max_frame, self.timeout)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass

    @property
    def closed(self) -> bool:
        return self._closed


def serve_forever(listener: Listener, handler) -> None:
    """Accept loop: one daemon thread per connection until the listener closes.

    `handler(endpoint)` owns the connection and must close it.
    """
    while True:
        try:
            ep = listener.accept()
        except TransportError:
            if listener.closed:
                return
            raise
        t = threading.Thread(target=handler, args=(ep,), daemon=True)
        t.start()
