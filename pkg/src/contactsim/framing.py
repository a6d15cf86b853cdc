"""Length-prefixed request/response frames over TCP.

A frame is ``[4-byte big-endian length][1-byte opcode][canonical JSON body]``
where the length counts the opcode byte plus the body. Responses reuse the
layout with opcode ``OK`` or ``ERROR``.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from typing import Any, Callable

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024

OK = 0x00
ERROR = 0xFF


class ServiceUnavailable(ConnectionError):
    """The remote service could not be reached or dropped the connection."""


class RequestRejected(ValueError):
    """The service answered with an error."""


class FrameError(IOError):
    pass


def encode_body(body: Any) -> bytes:
    return json.dumps(body, separators=(",", ":"), sort_keys=True).encode("utf-8")


def pack_frame(opcode: int, body: Any) -> bytes:
    data = bytes([opcode]) + encode_body(body)
    return HEADER.pack(len(data)) + data


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise FrameError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> tuple[int, Any]:
    (length,) = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length < 1 or length > MAX_FRAME:
        raise FrameError(f"bad frame length {length}")
    data = _recv_exact(sock, length)
    body = json.loads(data[1:].decode("utf-8")) if length > 1 else None
    return data[0], body


class FramedServer:
    """Threaded TCP server dispatching opcodes to handler callables.

    ``kill()`` drops the listener and every open connection at once, without
    any orderly goodbye, which is how the fault harness models a crash.
    """

    def __init__(self, handlers: dict[int, Callable[[Any], Any]], host: str = "127.0.0.1", port: int = 0,
                 name: str = "service"):
        self.handlers = handlers
        self.name = name
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                outer._serve_connection(self.request)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "FramedServer":
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                                        name=f"{self.name}-server", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._server.serve_forever(poll_interval=0.1)

    def _serve_connection(self, sock: socket.socket):
        with self._conns_lock:
            self._conns.add(sock)
        try:
            while True:
                try:
                    opcode, body = recv_frame(sock)
                except (FrameError, OSError, ValueError):
                    return
                handler = self.handlers.get(opcode)
                try:
                    if handler is None:
                        raise RequestRejected(f"unknown opcode {opcode}")
                    reply = pack_frame(OK, handler(body))
                except (RequestRejected, ValueError, KeyError, TypeError) as exc:
                    reply = pack_frame(ERROR, {"error": str(exc)})
                except OSError as exc:
                    log.warning("%s: request failed: %s", self.name, exc)
                    reply = pack_frame(ERROR, {"error": "io failure"})
                try:
                    sock.sendall(reply)
                except OSError:
                    return
        finally:
            with self._conns_lock:
                self._conns.discard(sock)

    def kill(self):
        self._server.shutdown()
        self._server.server_close()
        with self._conns_lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        if self._thread is not None:
            self._thread.join(timeout=2)

    stop = kill


class FramedClient:
    """One persistent connection, re-opened on demand.

    Transport-level failures surface as ``ServiceUnavailable``; requests are
    serialized, so per-client ordering is preserved.
    """

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            except OSError as exc:
                raise ServiceUnavailable(f"cannot connect to {self.host}:{self.port}") from exc
        return self._sock

    def request(self, opcode: int, body: Any = None) -> Any:
        with self._lock:
            sock = self._connect()
            try:
                sock.sendall(pack_frame(opcode, body))
                status, reply = recv_frame(sock)
            except (OSError, FrameError, ValueError) as exc:
                self._drop()
                raise ServiceUnavailable(f"{self.host}:{self.port}: {exc}") from exc
        if status == ERROR:
            raise RequestRejected((reply or {}).get("error", "rejected"))
        return reply

    def _drop(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self):
        with self._lock:
            self._drop()


def parse_address(text: str, default_port: int) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        return text or "127.0.0.1", default_port
    return host, int(port)
