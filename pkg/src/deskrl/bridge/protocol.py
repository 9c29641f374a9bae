"""Wire protocol: length-prefixed JSON messages over a byte stream.

Framing: a 4-byte big-endian unsigned length followed by exactly that many
bytes of UTF-8 JSON. One JSON object per frame:

    {"type": <str>, "seq": <int>, "payload": <object>}

``type`` is one of MESSAGE_TYPES; ``seq`` increases by one per message per
direction, so a receiver can detect drops. The framing is trivial to speak
from any language, which is the point.
"""

from __future__ import annotations

import json
import struct

MESSAGE_TYPES = ("frame", "metrics", "demo_step_ack", "command", "session_info", "error")
COMMAND_KINDS = (
    "hello",
    "intervene_reset",
    "pause",
    "resume",
    "start_demo",
    "end_demo",
    "teleop_action",
)

MAX_FRAME_BYTES = 16 * 1024 * 1024
_HEADER = struct.Struct(">I")


class ProtocolError(ValueError):
    pass


def encode_message(msg: dict) -> bytes:
    body = json.dumps(msg, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise ProtocolError(f"message of {len(body)} bytes exceeds frame limit")
    return _HEADER.pack(len(body)) + body


def validate_message(msg) -> dict:
    """Checks the envelope; raises ProtocolError with a reason otherwise."""
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    mtype = msg.get("type")
    if mtype not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {mtype!r}")
    if not isinstance(msg.get("seq"), int) or msg["seq"] < 0:
        raise ProtocolError("seq must be a non-negative integer")
    if "payload" not in msg or not isinstance(msg["payload"], dict):
        raise ProtocolError("payload must be an object")
    if mtype == "command":
        kind = msg["payload"].get("kind")
        if kind not in COMMAND_KINDS:
            raise ProtocolError(f"unknown command kind {kind!r}")
    return msg


class MessageDecoder:
    """Incremental decoder: feed arbitrary byte chunks, get whole messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[dict]:
        self._buf.extend(chunk)
        out = []
        while True:
            if len(self._buf) < _HEADER.size:
                return out
            (length,) = _HEADER.unpack_from(self._buf, 0)
            if length > MAX_FRAME_BYTES:
                raise ProtocolError(f"frame of {length} bytes exceeds limit")
            if len(self._buf) < _HEADER.size + length:
                return out
            body = bytes(self._buf[_HEADER.size : _HEADER.size + length])
            del self._buf[: _HEADER.size + length]
            try:
                out.append(json.loads(body.decode("utf-8")))
            except (UnicodeDecodeError, json.JSONDecodeError) as err:
                raise ProtocolError(f"undecodable message body: {err}") from None
