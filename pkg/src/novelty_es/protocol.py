"""Wire format for master/worker messages.

A frame is a 4-byte big-endian payload length followed by a UTF-8 JSON
object.  Every message carries ``type`` (one of :data:`MESSAGE_TYPES`) and
``version``.  Parameter vectors travel as base64 of little-endian float64.
The in-process transport passes the same dicts through queues.
"""

from __future__ import annotations

import base64
import hashlib
import json
import queue
import socket
import struct
import threading
from typing import Optional

import numpy as np

PROTOCOL_VERSION = 1
MESSAGE_TYPES = ("HELLO", "ASSIGN", "MEAN", "RESULT", "DROP", "SHUTDOWN")
MAX_FRAME = 1 << 30

_LEN = struct.Struct(">I")


class ProtocolError(RuntimeError):
    pass


def message(kind: str, **fields) -> dict:
    if kind not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {kind!r}")
    return {"type": kind, "version": PROTOCOL_VERSION, **fields}


def check_message(msg) -> dict:
    if not isinstance(msg, dict) or msg.get("type") not in MESSAGE_TYPES:
        raise ProtocolError(f"malformed message: {msg!r:.200}")
    if msg.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: {msg.get('version')!r}")
    return msg


def encode_frame(msg: dict) -> bytes:
    payload = json.dumps(check_message(msg), separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> dict:
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable frame: {exc}") from exc
    return check_message(msg)


def encode_vector(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f8").tobytes()).decode("ascii")


def decode_vector(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


def theta_version(theta: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(theta, dtype="<f8").tobytes()).hexdigest()[:16]


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


class SocketChannel:
    """Blocking framed-message channel over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._send_lock = threading.Lock()

    def send(self, msg: dict) -> None:
        data = encode_frame(msg)
        with self._send_lock:
            self.sock.sendall(data)

    def recv(self) -> Optional[dict]:
        """Next message, or None once the peer has closed the connection."""
        head = _recv_exact(self.sock, _LEN.size)
        if head is None:
            return None
        (length,) = _LEN.unpack(head)
        if length > MAX_FRAME:
            raise ProtocolError(f"frame of {length} bytes exceeds limit")
        payload = _recv_exact(self.sock, length)
        if payload is None:
            return None
        return decode_payload(payload)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class QueueChannel:
    """In-process channel; ``None`` in the queue signals a closed peer."""

    def __init__(self, inbox: "queue.Queue", outbox: "queue.Queue"):
        self.inbox = inbox
        self.outbox = outbox

    def send(self, msg: dict) -> None:
        self.outbox.put(check_message(msg))

    def recv(self) -> Optional[dict]:
        return self.inbox.get()

    def close(self) -> None:
        self.outbox.put(None)


def queue_pair():
    """Two connected in-process channel ends."""
    a, b = queue.Queue(), queue.Queue()
    return QueueChannel(a, b), QueueChannel(b, a)
