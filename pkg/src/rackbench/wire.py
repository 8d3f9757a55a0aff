"""Framed binary telemetry format.

Every frame starts with a 6-byte header; all integers are little-endian:

    offset 0  magic      0x4E 0x50 ("NP")
    offset 2  version    0x01
    offset 3  msg_type   0x01 Hello | 0x02 Sample | 0x03 Bye
    offset 4  payload_len u16

Payloads:

    Hello  (6 bytes):  node_id u16, sample_period_ms u32 (>= 1)
    Sample (24 bytes): node_id u16, seq u64, timestamp_us u64,
                       current_uA i32 (two's complement, may be negative),
                       bus_mV u16
    Bye    (0 bytes)

Full frame sizes are therefore 12, 30, and 6 bytes. Decoding is incremental:
partial input is held until enough bytes arrive; malformed input raises one of
the WireError subclasses and the connection carrying it should be dropped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"NP"
VERSION = 1

MSG_HELLO = 0x01
MSG_SAMPLE = 0x02
MSG_BYE = 0x03

_HEADER = struct.Struct("<2sBBH")
_HELLO = struct.Struct("<HI")
_SAMPLE = struct.Struct("<HQQiH")

HEADER_LEN = _HEADER.size  # 6
HELLO_PAYLOAD_LEN = _HELLO.size  # 6
SAMPLE_PAYLOAD_LEN = _SAMPLE.size  # 24

_U16 = (0, 0xFFFF)
_U32 = (0, 0xFFFFFFFF)
_U64 = (0, 0xFFFFFFFFFFFFFFFF)
_I32 = (-(2**31), 2**31 - 1)


class WireError(Exception):
    """Base class for frame decode failures. All are fatal to the stream."""


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class UnknownMsgType(WireError):
    pass


class PayloadLengthMismatch(WireError):
    pass


def _check(name: str, value: int, bounds: tuple[int, int]) -> None:
    lo, hi = bounds
    if not isinstance(value, int) or isinstance(value, bool) or not lo <= value <= hi:
        raise ValueError(f"{name}={value!r} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class Hello:
    node_id: int
    sample_period_ms: int

    def __post_init__(self) -> None:
        _check("node_id", self.node_id, _U16)
        _check("sample_period_ms", self.sample_period_ms, _U32)
        if self.sample_period_ms < 1:
            raise ValueError("sample_period_ms must be >= 1")


@dataclass(frozen=True)
class Sample:
    node_id: int
    seq: int
    timestamp_us: int
    current_uA: int
    bus_mV: int

    def __post_init__(self) -> None:
        _check("node_id", self.node_id, _U16)
        _check("seq", self.seq, _U64)
        _check("timestamp_us", self.timestamp_us, _U64)
        _check("current_uA", self.current_uA, _I32)
        _check("bus_mV", self.bus_mV, _U16)


@dataclass(frozen=True)
class Bye:
    pass


Message = Hello | Sample | Bye

_PAYLOAD_LEN_FOR_TYPE = {
    MSG_HELLO: HELLO_PAYLOAD_LEN,
    MSG_SAMPLE: SAMPLE_PAYLOAD_LEN,
    MSG_BYE: 0,
}


def encode(msg: Message) -> bytes:
    """Serialize one message to its complete frame."""
    if isinstance(msg, Hello):
        payload = _HELLO.pack(msg.node_id, msg.sample_period_ms)
        msg_type = MSG_HELLO
    elif isinstance(msg, Sample):
        payload = _SAMPLE.pack(
            msg.node_id, msg.seq, msg.timestamp_us, msg.current_uA, msg.bus_mV
        )
        msg_type = MSG_SAMPLE
    elif isinstance(msg, Bye):
        payload = b""
        msg_type = MSG_BYE
    else:
        raise TypeError(f"not a wire message: {msg!r}")
    return _HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def decode_frame(buf: bytes | bytearray | memoryview) -> tuple[Message | None, int]:
    """Decode at most one frame from the front of buf.

    Returns (message, bytes_consumed) for a complete frame, or (None, 0) when
    more bytes are needed. Nothing is consumed on a partial frame. Malformed
    headers raise immediately, even before the payload has arrived.
    """
    if len(buf) < HEADER_LEN:
        return None, 0
    magic, version, msg_type, payload_len = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(magic)!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    expected = _PAYLOAD_LEN_FOR_TYPE.get(msg_type)
    if expected is None:
        raise UnknownMsgType(f"msg_type 0x{msg_type:02x}")
    if payload_len != expected:
        raise PayloadLengthMismatch(
            f"msg_type 0x{msg_type:02x} requires payload of {expected}, "
            f"header says {payload_len}"
        )
    total = HEADER_LEN + payload_len
    if len(buf) < total:
        return None, 0
    payload = bytes(buf[HEADER_LEN:total])
    if msg_type == MSG_HELLO:
        node_id, period = _HELLO.unpack(payload)
        return Hello(node_id, period), total
    if msg_type == MSG_SAMPLE:
        node_id, seq, ts, current, bus = _SAMPLE.unpack(payload)
        return Sample(node_id, seq, ts, current, bus), total
    return Bye(), total


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, iterate complete messages."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def next_message(self) -> Message | None:
        msg, consumed = decode_frame(self._buf)
        if msg is not None:
            del self._buf[:consumed]
        return msg

    def __iter__(self):
        while True:
            msg = self.next_message()
            if msg is None:
                return
            yield msg

    @property
    def pending(self) -> int:
        """Bytes buffered but not yet decodable."""
        return len(self._buf)
