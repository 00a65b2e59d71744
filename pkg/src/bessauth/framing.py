"""Framed byte-stream transport with a DNP3-style link CRC.

Frame: 0x05 0x64 | length (payload bytes) | msg_type | seq | payload |
crc16 over length..payload.  Everything on the wire is big-endian.  The
frame body is a simplified single block, not interoperable with real
DNP3 equipment; only the start bytes and CRC polynomial are borrowed.

Challenge/reply words travel as opaque 64-bit analog point values so that
arbitrary bit patterns (including ones aliasing float NaNs) survive the
round trip exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

START = b"\x05\x64"
MAX_PAYLOAD = 255

# CRC-16/DNP: poly 0x3D65 reflected, init 0, final complement.
_POLY_REFLECTED = 0xA6BC


def _make_crc_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY_REFLECTED if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _make_crc_table()


def crc16_dnp(data: bytes) -> int:
    crc = 0x0000
    for b in data:
        crc = (crc >> 8) ^ _CRC_TABLE[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFF


class MsgType(IntEnum):
    ENROLL = 1
    CHALLENGE = 2
    REPLY = 3
    AUTH_RESULT = 4
    SETPOINT = 5
    ACK = 6
    ERROR = 7


class ErrorReason(IntEnum):
    BAD_CRC = 1
    BAD_SEQ = 2
    MALFORMED = 3
    UNAUTHENTICATED = 4


class FrameError(Exception):
    pass


class BadStart(FrameError):
    pass


class BadCrc(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class PayloadTooLong(FrameError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    seq: int
    payload: bytes


@dataclass(frozen=True)
class FrameDefect:
    """A non-decodable chunk seen on the stream; triggers a NAK, never
    reaches protocol logic."""
    reason: ErrorReason


def encode_frame(msg_type: int, seq: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLong(f"payload {len(payload)} exceeds {MAX_PAYLOAD} bytes")
    body = bytes([len(payload), msg_type, seq & 0xFF]) + payload
    return START + body + struct.pack(">H", crc16_dnp(body))


def decode_frame(data: bytes) -> Frame:
    if len(data) < 7:
        raise TruncatedFrame(f"frame needs >= 7 bytes, got {len(data)}")
    if data[:2] != START:
        raise BadStart(f"bad start bytes {data[:2].hex()}")
    length = data[2]
    end = 5 + length + 2
    if len(data) < end:
        raise TruncatedFrame(f"frame declares {length} payload bytes, data truncated")
    body = data[2:5 + length]
    (crc,) = struct.unpack(">H", data[5 + length:end])
    if crc != crc16_dnp(body):
        raise BadCrc(f"crc mismatch: got 0x{crc:04x}, computed 0x{crc16_dnp(body):04x}")
    try:
        msg_type = MsgType(data[3])
    except ValueError:
        raise FrameError(f"unknown msg_type {data[3]}")
    return Frame(msg_type=msg_type, seq=data[4], payload=bytes(data[5:5 + length]))


def frame_length(data: bytes) -> int:
    """Total encoded length implied by the header (start + 3 + payload + crc)."""
    return 7 + data[2]


class Deframer:
    """Incremental stream decoder that resynchronizes on the start marker.

    feed() returns Frames interleaved with FrameDefects; a defect consumes
    the corrupted region so at most that one frame is lost.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame | FrameDefect]:
        self._buf.extend(data)
        out: list[Frame | FrameDefect] = []
        while True:
            idx = self._buf.find(START)
            if idx < 0:
                # keep one byte in case a start marker straddles two chunks
                del self._buf[:max(0, len(self._buf) - 1)]
                return out
            if idx:
                del self._buf[:idx]
            if len(self._buf) < 3:
                return out
            need = frame_length(self._buf)
            if len(self._buf) < need:
                return out
            try:
                out.append(decode_frame(bytes(self._buf[:need])))
                del self._buf[:need]
            except BadCrc:
                out.append(FrameDefect(ErrorReason.BAD_CRC))
                del self._buf[:2]  # rescan past the start marker
            except FrameError:
                out.append(FrameDefect(ErrorReason.MALFORMED))
                del self._buf[:2]


def pack_analog(point_index: int, bits: int) -> bytes:
    """64-bit analog point payload: the value is carried as raw bits."""
    return struct.pack(">HQ", point_index & 0xFFFF, bits & 0xFFFFFFFFFFFFFFFF)


def unpack_analog(payload: bytes) -> tuple[int, int]:
    if len(payload) < 10:
        raise TruncatedFrame(f"analog payload needs 10 bytes, got {len(payload)}")
    return struct.unpack(">HQ", payload[:10])


def pack_setpoint(point_index: int, watts: float) -> bytes:
    """Setpoint payload: numeric 64-bit float watts.  Positive commands
    charge, negative discharge, zero is a no-op."""
    return struct.pack(">Hd", point_index & 0xFFFF, watts)


def unpack_setpoint(payload: bytes) -> tuple[int, float]:
    if len(payload) < 10:
        raise TruncatedFrame(f"setpoint payload needs 10 bytes, got {len(payload)}")
    return struct.unpack(">Hd", payload[:10])


def pack_auth_result(accepted: bool, reason_code: int = 0) -> bytes:
    return bytes([1 if accepted else 0, reason_code & 0xFF])


def unpack_auth_result(payload: bytes) -> tuple[bool, int]:
    if len(payload) < 2:
        raise TruncatedFrame("auth result payload needs 2 bytes")
    return payload[0] == 1, payload[1]


def pack_enroll(replies: list[int], round_counter: int) -> bytes:
    body = bytes([len(replies)])
    for cell_id, r in enumerate(replies):
        body += bytes([cell_id, r & 0xFF])
    return body + struct.pack(">Q", round_counter)


def unpack_enroll(payload: bytes) -> tuple[list[int], int]:
    if not payload:
        raise TruncatedFrame("empty enroll payload")
    n = payload[0]
    need = 1 + 2 * n + 8
    if len(payload) < need:
        raise TruncatedFrame(f"enroll payload needs {need} bytes, got {len(payload)}")
    replies = [0] * n
    for slot in range(n):
        cell_id, r = payload[1 + 2 * slot], payload[2 + 2 * slot]
        if cell_id >= n:
            raise FrameError(f"enroll cell id {cell_id} out of range")
        replies[cell_id] = r
    (counter,) = struct.unpack(">Q", payload[1 + 2 * n:need])
    return replies, counter
