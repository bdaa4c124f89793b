"""Public classical channel between Alice and Bob.

Frame layout::

    [4 bytes  payload length, big-endian]
    [1 byte   message type]
    [N bytes  payload]

Payloads by type (all integers big-endian, bit vectors packed MSB first and
zero-padded to a whole byte):

    SETTINGS_DISCLOSURE  u32 count | count bits (setting index per coincidence)
    TEST_SUBSET_REVEAL   u32 count | count x u32 positions | count bits (values)
    PARITY_VECTOR        u32 block count | block-count parity bits
    PARITY_DECISION      u32 block count | block-count bits (1 = keep block)
    ACK                  empty
"""
from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError, ProtocolDesyncError

HEADER = struct.Struct("!IB")
MAX_PAYLOAD = 1 << 30


class MessageType(enum.IntEnum):
    SETTINGS_DISCLOSURE = 1
    TEST_SUBSET_REVEAL = 2
    PARITY_VECTOR = 3
    PARITY_DECISION = 4
    ACK = 5


def pack_bits(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack("!I", bits.size) + np.packbits(bits).tobytes()


def unpack_bits(buf: bytes, pos: int = 0) -> tuple[np.ndarray, int]:
    if len(buf) < pos + 4:
        raise InvalidInputError("truncated bit vector")
    (n,) = struct.unpack_from("!I", buf, pos)
    pos += 4
    nbytes = (n + 7) // 8
    if len(buf) < pos + nbytes:
        raise InvalidInputError("truncated bit vector")
    bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, pos), count=n)
    return bits, pos + nbytes


@dataclass(frozen=True, eq=False)
class ChannelMessage:
    type: MessageType
    bits: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint8))
    positions: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "type", MessageType(self.type))
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.uint8))
        if np.any(self.bits > 1):
            raise InvalidInputError("bit vectors hold only 0 and 1")
        if self.type is MessageType.TEST_SUBSET_REVEAL:
            if self.positions is None or len(self.positions) != len(self.bits):
                raise InvalidInputError("a test reveal needs one position per bit")
            object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.int64))
        elif self.positions is not None:
            raise InvalidInputError(f"{self.type.name} carries no positions")
        if self.type is MessageType.ACK and self.bits.size:
            raise InvalidInputError("ACK carries no payload")

    def __eq__(self, other):
        if not isinstance(other, ChannelMessage):
            return NotImplemented
        same_pos = (self.positions is None and other.positions is None) or (
            self.positions is not None
            and other.positions is not None
            and np.array_equal(self.positions, other.positions)
        )
        return self.type == other.type and np.array_equal(self.bits, other.bits) and same_pos

    def payload(self) -> bytes:
        if self.type is MessageType.ACK:
            return b""
        if self.type is MessageType.TEST_SUBSET_REVEAL:
            pos = np.asarray(self.positions, dtype=">u4").tobytes()
            packed = pack_bits(self.bits)
            return packed[:4] + pos + packed[4:]
        return pack_bits(self.bits)

    def encode(self) -> bytes:
        body = self.payload()
        return HEADER.pack(len(body), int(self.type)) + body

    @classmethod
    def from_payload(cls, mtype: int, body: bytes) -> "ChannelMessage":
        try:
            mtype = MessageType(mtype)
        except ValueError:
            raise InvalidInputError(f"unknown message type {mtype}") from None
        if mtype is MessageType.ACK:
            if body:
                raise InvalidInputError("ACK carries no payload")
            return cls(mtype)
        if mtype is MessageType.TEST_SUBSET_REVEAL:
            if len(body) < 4:
                raise InvalidInputError("truncated test reveal")
            (n,) = struct.unpack_from("!I", body, 0)
            end = 4 + 4 * n
            if len(body) < end:
                raise InvalidInputError("truncated test reveal")
            positions = np.frombuffer(body, ">u4", n, 4).astype(np.int64)
            bits, used = unpack_bits(body[:4] + body[end:])
            if used != len(body) - 4 * n:
                raise InvalidInputError("trailing bytes in payload")
            return cls(mtype, bits, positions)
        bits, used = unpack_bits(body)
        if used != len(body):
            raise InvalidInputError("trailing bytes in payload")
        return cls(mtype, bits)

    @classmethod
    def decode(cls, frame: bytes) -> "ChannelMessage":
        if len(frame) < HEADER.size:
            raise InvalidInputError("frame shorter than header")
        length, mtype = HEADER.unpack_from(frame)
        if length > MAX_PAYLOAD:
            raise InvalidInputError(f"payload too large: {length}")
        if len(frame) != HEADER.size + length:
            raise InvalidInputError("frame length does not match header")
        return cls.from_payload(mtype, frame[HEADER.size:])


def write_frame(stream, msg: ChannelMessage) -> None:
    """Write one framed message to a binary file-like object."""
    stream.write(msg.encode())


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError("stream closed mid-frame" if buf else "stream closed")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(stream) -> ChannelMessage:
    header = _read_exact(stream, HEADER.size)
    length, mtype = HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise InvalidInputError(f"payload too large: {length}")
    body = _read_exact(stream, length) if length else b""
    return ChannelMessage.from_payload(mtype, body)


PEER = {"alice": "bob", "bob": "alice"}


class LocalChannel:
    """In-process ordered, reliable duplex link.

    Every message goes through the byte framing on its way across, and is
    appended to :attr:`log` as ``(sender, message)`` for later audit.
    """

    def __init__(self):
        self._inbox = {"alice": deque(), "bob": deque()}
        self.log: list[tuple[str, ChannelMessage]] = []
        self.bytes_sent = 0

    def send(self, sender: str, msg: ChannelMessage) -> None:
        frame = msg.encode()
        self._inbox[PEER[sender]].append(frame)
        self.bytes_sent += len(frame)
        self.log.append((sender, msg))

    def recv(self, receiver: str, expect: MessageType | None = None) -> ChannelMessage:
        box = self._inbox[receiver]
        if not box:
            raise ProtocolDesyncError(f"{receiver} expected a message but none is pending")
        msg = ChannelMessage.decode(box.popleft())
        if expect is not None and msg.type is not expect:
            raise ProtocolDesyncError(f"{receiver} expected {expect.name}, got {msg.type.name}")
        return msg

    def pending(self, party: str) -> int:
        return len(self._inbox[party])
