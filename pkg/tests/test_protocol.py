import json
import socket
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from novelty_es.protocol import (
    MESSAGE_TYPES, PROTOCOL_VERSION, ProtocolError, SocketChannel, check_message, decode_payload,
    decode_vector, encode_frame, encode_vector, message, queue_pair, theta_version,
)


def test_frame_layout():
    frame = encode_frame(message("SHUTDOWN"))
    (n,) = struct.unpack(">I", frame[:4])
    assert n == len(frame) - 4
    body = json.loads(frame[4:].decode("utf-8"))
    assert body == {"type": "SHUTDOWN", "version": PROTOCOL_VERSION}
    assert decode_payload(frame[4:]) == body


def test_version_and_type_required():
    with pytest.raises(ProtocolError):
        message("HELLO!")
    with pytest.raises(ProtocolError):
        check_message({"type": "HELLO"})
    with pytest.raises(ProtocolError):
        check_message({"type": "HELLO", "version": PROTOCOL_VERSION + 1})
    with pytest.raises(ProtocolError):
        decode_payload(b"\xff\xfe")


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), max_size=50))
def test_vector_round_trip_exact(values):
    v = np.array(values, dtype=np.float64)
    assert np.array_equal(decode_vector(encode_vector(v)), v)


def test_theta_version_sensitive():
    a = np.zeros(5)
    b = a.copy()
    b[3] = 1e-300
    assert theta_version(a) != theta_version(b)
    assert theta_version(a) == theta_version(a.copy())


def test_socket_channel_round_trip():
    s1, s2 = socket.socketpair()
    a, b = SocketChannel(s1), SocketChannel(s2)
    for kind in MESSAGE_TYPES:
        a.send(message(kind, payload=[1, 2.5, "x"]))
        got = b.recv()
        assert got["type"] == kind and got["payload"] == [1, 2.5, "x"]
    a.close()
    assert b.recv() is None
    b.close()


def test_queue_channel_close_signal():
    a, b = queue_pair()
    a.send(message("HELLO", name="w"))
    assert b.recv()["name"] == "w"
    a.close()
    assert b.recv() is None
