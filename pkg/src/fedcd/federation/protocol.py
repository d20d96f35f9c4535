"""Binary framing for the federation messages.

Frame layout (header fields big-endian)::

    magic u32 = 0x46434431 ("FCD1") | version u8 | msg_type u8 | outer_t u32
    | round u32 | d u32 | payload_len u64 (bytes)
    | payload: little-endian float64 values | crc32(payload) u32
"""

from __future__ import annotations

import enum
import socket
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = 0x46434431
VERSION = 1
HEADER = struct.Struct(">IBBIIIQ")
CRC = struct.Struct(">I")
MAX_PAYLOAD = 1 << 30


class MsgType(enum.IntEnum):
    HELLO = 1
    U_UPLOAD = 2
    U_BROADCAST = 3
    PHI_UPLOAD = 4
    PHI_BROADCAST = 5
    SCHEDULE = 6
    DONE = 7
    REJECT = 8


class ProtocolError(ValueError):
    def __init__(self, field_name: str, detail: str = ""):
        self.field = field_name
        super().__init__(f"protocol error in {field_name}" + (f": {detail}" if detail else ""))


@dataclass
class RoundMessage:
    msg_type: MsgType
    outer_t: int = 0
    round: int = 0
    d: int = 0
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.msg_type = MsgType(self.msg_type)
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float64).ravel()

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoundMessage):
            return NotImplemented
        return (self.msg_type == other.msg_type and self.outer_t == other.outer_t
                and self.round == other.round and self.d == other.d
                and self.payload.shape == other.payload.shape
                and self.payload.tobytes() == other.payload.tobytes())

    @property
    def matrix(self) -> np.ndarray:
        return self.payload.reshape(self.d, self.d)


def tcp_encode(msg: RoundMessage) -> bytes:
    body = msg.payload.astype("<f8").tobytes()
    head = HEADER.pack(MAGIC, VERSION, int(msg.msg_type), msg.outer_t, msg.round, msg.d,
                       len(body))
    return head + body + CRC.pack(zlib.crc32(body))


def _parse_header(head: bytes) -> tuple[MsgType, int, int, int, int]:
    if len(head) < HEADER.size:
        raise ProtocolError("header", f"truncated frame ({len(head)} of {HEADER.size} bytes)")
    magic, version, mtype, outer_t, rnd, d, plen = HEADER.unpack(head[:HEADER.size])
    if magic != MAGIC:
        raise ProtocolError("magic", f"0x{magic:08x}")
    if version != VERSION:
        raise ProtocolError("version", f"got {version}, expected {VERSION}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError("msg_type", str(mtype)) from None
    if plen % 8 or plen > MAX_PAYLOAD:
        raise ProtocolError("payload_len", str(plen))
    return mtype, outer_t, rnd, d, plen


def _finish(mtype, outer_t, rnd, d, body: bytes, crc: bytes) -> RoundMessage:
    if CRC.unpack(crc)[0] != zlib.crc32(body):
        raise ProtocolError("crc", "payload checksum mismatch")
    payload = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if mtype in (MsgType.U_UPLOAD, MsgType.U_BROADCAST) and payload.size not in (0, d * d):
        raise ProtocolError("payload_len", f"{payload.size} values for a {d}x{d} matrix")
    return RoundMessage(mtype, outer_t, rnd, d, payload)


def tcp_decode(data: bytes) -> RoundMessage:
    mtype, outer_t, rnd, d, plen = _parse_header(data)
    end = HEADER.size + plen
    if len(data) < end + CRC.size:
        raise ProtocolError("payload", f"truncated frame ({len(data)} of {end + CRC.size} bytes)")
    if len(data) > end + CRC.size:
        raise ProtocolError("payload", "trailing bytes after frame")
    return _finish(mtype, outer_t, rnd, d, data[HEADER.size:end], data[end:end + CRC.size])


def _recv_exact(sock: socket.socket, n: int, what: str) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError(what, f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def send_message(sock: socket.socket, msg: RoundMessage) -> int:
    frame = tcp_encode(msg)
    sock.sendall(frame)
    return len(frame)


def recv_message(sock: socket.socket) -> RoundMessage:
    head = _recv_exact(sock, HEADER.size, "header")
    mtype, outer_t, rnd, d, plen = _parse_header(head)
    body = _recv_exact(sock, plen, "payload")
    crc = _recv_exact(sock, CRC.size, "crc")
    return _finish(mtype, outer_t, rnd, d, body, crc)
