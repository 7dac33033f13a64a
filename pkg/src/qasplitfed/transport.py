"""Request/response transports between split clients and the server.

``InProcessTransport`` calls the server directly. ``TcpTransport`` sends the
binary wire encoding over a loopback socket to a :class:`TcpServer`, which
serializes access to the wrapped server node with a lock.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

import numpy as np

from .errors import ProtocolError
from .params import ParamVector
from .split import HEADER_SIZE, BoundaryMessage, decode_header, decode_message, encode_message

log = logging.getLogger(__name__)

MAX_PAYLOAD = 1 << 30


def error_message(msg: BoundaryMessage, text: str) -> BoundaryMessage:
    payload = ParamVector([("cmd.error", np.zeros(0)), (f"text.{text}", np.zeros(0))])
    return BoundaryMessage("control", msg.round, payload)


def raise_if_error(reply: BoundaryMessage) -> BoundaryMessage:
    if reply.kind == "control" and "cmd.error" in reply.payload:
        text = next((n[5:] for n in reply.payload if n.startswith("text.")), "remote error")
        raise ProtocolError(text)
    return reply


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> BoundaryMessage:
    header = recv_exact(sock, HEADER_SIZE)
    _, _, length = decode_header(header)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {length} bytes is too large")
    return decode_message(header + recv_exact(sock, length))


class InProcessTransport:
    def __init__(self, server):
        self.server = server

    def request(self, msg: BoundaryMessage) -> BoundaryMessage:
        return self.server.handle(msg)

    def close(self) -> None:
        pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        node = self.server.node
        while True:
            try:
                msg = read_message(self.request)
            except ConnectionError:
                return
            except ProtocolError as exc:
                log.warning("dropping connection: %s", exc)
                return
            with self.server.node_lock:
                try:
                    reply = node.handle(msg)
                except ProtocolError as exc:
                    reply = error_message(msg, str(exc))
            self.request.sendall(encode_message(reply))


class TcpServer(socketserver.ThreadingTCPServer):
    """Loopback server exposing a node's ``handle`` over the wire format."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, node, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.node = node
        self.node_lock = threading.Lock()
        self._thread: threading.Thread | None = None

    def start(self) -> "TcpServer":
        self._thread = threading.Thread(target=self.serve_forever, name="splitfed-server", daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


class TcpTransport:
    def __init__(self, address):
        self.sock = socket.create_connection(address)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def request(self, msg: BoundaryMessage) -> BoundaryMessage:
        self.sock.sendall(encode_message(msg))
        return raise_if_error(read_message(self.sock))

    def close(self) -> None:
        self.sock.close()
