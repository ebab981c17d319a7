"""NetDAM packet model and its canonical binary encoding.

Frame layout (all integers big-endian)::

    magic(4) version(1) flags(1) dtype(1) status(1) sequence(8) opcode(2)
    seg_count(1) segments_left(1) segments(8 each: ip4 port2 callback2)
    address(8) length(4) [block_hash(8) if HASH_PRESENT] payload_len(4) payload

A frame without segments, hash or payload is 36 bytes.
"""

from __future__ import annotations

import enum
import ipaddress
import socket
import struct
from dataclasses import dataclass, field

MAGIC = b"NDAM"
VERSION = 1

MAX_PAYLOAD = 8192
MAX_SEGMENTS = 16
MAX_DATAGRAM = 9000

FNV_OFFSET_BASIS = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

_HEAD = struct.Struct("!4sBBBBQHBB")
_SEGMENT = struct.Struct("!4sHH")
_ADDR_LEN = struct.Struct("!QI")
_HASH = struct.Struct("!Q")
_PAYLOAD_LEN = struct.Struct("!I")

HEADER_SIZE = _HEAD.size + _ADDR_LEN.size + _PAYLOAD_LEN.size
SEGMENT_SIZE = _SEGMENT.size
HASH_SIZE = _HASH.size


class Flag(enum.IntFlag):
    ACK = 0x01
    RELIABLE = 0x02
    ORDERED = 0x04
    HASH_PRESENT = 0x08
    TARGET_PACKET = 0x10


KNOWN_FLAGS = 0x1F


class DType(enum.IntEnum):
    BYTE = 0
    INT32 = 1
    FLOAT32 = 2


ELEMENT_SIZE = {DType.BYTE: 1, DType.INT32: 4, DType.FLOAT32: 4}

Endpoint = tuple[str, int]


class CodecError(ValueError):
    """Base class for everything the codec rejects."""


class InvariantViolation(CodecError):
    pass


class BadMagic(CodecError):
    pass


class BadVersion(CodecError):
    pass


class Truncated(CodecError):
    pass


class ReservedFlagSet(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


@dataclass(frozen=True)
class Segment:
    ip: str
    port: int
    callback_opcode: int = 0

    @property
    def endpoint(self) -> Endpoint:
        return (self.ip, self.port)


@dataclass(frozen=True)
class SegmentStack:
    """Hops of a chained instruction.

    ``segments_left`` counts hops still to visit; the next hop is
    ``segments[len(segments) - segments_left]``.
    """

    segments: tuple[Segment, ...] = ()
    segments_left: int = 0

    def __len__(self) -> int:
        return len(self.segments)

    def next_segment(self) -> Segment | None:
        if self.segments_left == 0:
            return None
        return self.segments[len(self.segments) - self.segments_left]

    def advance(self) -> SegmentStack:
        if self.segments_left == 0:
            raise InvariantViolation("segment stack already exhausted")
        return SegmentStack(self.segments, self.segments_left - 1)


@dataclass(frozen=True)
class NetdamPacket:
    opcode: int
    address: int = 0
    length: int = 0
    payload: bytes = b""
    sequence: int = 0
    flags: int = 0
    dtype: int = DType.BYTE
    status: int = 0
    sr_stack: SegmentStack = field(default_factory=SegmentStack)
    block_hash: int | None = None
    version: int = VERSION

    @property
    def is_ack(self) -> bool:
        return bool(self.flags & Flag.ACK)

    def has(self, flag: Flag) -> bool:
        return bool(self.flags & flag)

    def encoded_size(self) -> int:
        return (
            HEADER_SIZE
            + SEGMENT_SIZE * len(self.sr_stack.segments)
            + (HASH_SIZE if self.flags & Flag.HASH_PRESENT else 0)
            + len(self.payload)
        )


def check_packet(p: NetdamPacket) -> None:
    """Raise InvariantViolation unless ``p`` can be put on the wire."""
    if p.version != VERSION:
        raise InvariantViolation(f"unsupported version {p.version}")
    if p.flags & ~KNOWN_FLAGS or not 0 <= p.flags <= 0xFF:
        raise InvariantViolation(f"reserved flag bits set: {p.flags:#x}")
    if p.dtype not in (0, 1, 2):
        raise InvariantViolation(f"bad dtype {p.dtype}")
    if not 0 <= p.status <= 0xFF:
        raise InvariantViolation(f"bad status {p.status}")
    if not 0 <= p.sequence <= _MASK64:
        raise InvariantViolation("sequence out of range")
    if not 0 <= p.opcode <= 0xFFFF:
        raise InvariantViolation("opcode out of range")
    if not 0 <= p.address <= _MASK64:
        raise InvariantViolation("address out of range")
    if not 0 <= p.length <= 0xFFFFFFFF:
        raise InvariantViolation("length out of range")
    if p.dtype in (DType.INT32, DType.FLOAT32) and p.length % 4:
        raise InvariantViolation("length must be a multiple of 4 for 32-bit dtypes")
    if len(p.payload) > MAX_PAYLOAD:
        raise InvariantViolation(f"payload of {len(p.payload)} bytes exceeds {MAX_PAYLOAD}")
    stack = p.sr_stack
    if len(stack.segments) > MAX_SEGMENTS:
        raise InvariantViolation(f"{len(stack.segments)} segments exceeds {MAX_SEGMENTS}")
    if not 0 <= stack.segments_left <= len(stack.segments):
        raise InvariantViolation("segments_left exceeds segment count")
    for seg in stack.segments:
        if not 0 <= seg.port <= 0xFFFF or not 0 <= seg.callback_opcode <= 0xFFFF:
            raise InvariantViolation(f"bad segment {seg}")
        try:
            ipaddress.IPv4Address(seg.ip)
        except ValueError as exc:
            raise InvariantViolation(f"bad segment ip {seg.ip!r}") from exc
    hashed = bool(p.flags & Flag.HASH_PRESENT)
    if hashed != (p.block_hash is not None):
        raise InvariantViolation("HASH_PRESENT must be set iff block_hash is given")
    if hashed and not 0 <= p.block_hash <= _MASK64:
        raise InvariantViolation("block_hash out of range")


def encode_packet(p: NetdamPacket) -> bytes:
    check_packet(p)
    stack = p.sr_stack
    parts = [
        _HEAD.pack(
            MAGIC, p.version, p.flags, p.dtype, p.status, p.sequence, p.opcode,
            len(stack.segments), stack.segments_left,
        )
    ]
    for seg in stack.segments:
        parts.append(_SEGMENT.pack(socket.inet_aton(seg.ip), seg.port, seg.callback_opcode))
    parts.append(_ADDR_LEN.pack(p.address, p.length))
    if p.block_hash is not None:
        parts.append(_HASH.pack(p.block_hash))
    parts.append(_PAYLOAD_LEN.pack(len(p.payload)))
    parts.append(bytes(p.payload))
    return b"".join(parts)


def decode_packet(b: bytes) -> NetdamPacket:
    b = bytes(b)
    if len(b) < 4 or b[:4] != MAGIC:
        raise BadMagic("missing NDAM magic")
    if len(b) < _HEAD.size:
        raise Truncated("frame shorter than fixed header")
    _, version, flags, dtype, status, sequence, opcode, seg_count, seg_left = _HEAD.unpack_from(b)
    if version != VERSION:
        raise BadVersion(f"version {version}")
    if flags & ~KNOWN_FLAGS:
        raise ReservedFlagSet(f"flags {flags:#04x}")
    if dtype not in (0, 1, 2):
        raise InvariantViolation(f"bad dtype {dtype}")
    if seg_count > MAX_SEGMENTS:
        raise InvariantViolation(f"{seg_count} segments exceeds {MAX_SEGMENTS}")
    if seg_left > seg_count:
        raise InvariantViolation("segments_left exceeds segment count")
    off = _HEAD.size
    hashed = bool(flags & Flag.HASH_PRESENT)
    need = off + seg_count * SEGMENT_SIZE + _ADDR_LEN.size + (HASH_SIZE if hashed else 0) + _PAYLOAD_LEN.size
    if len(b) < need:
        raise Truncated(f"need {need} header bytes, have {len(b)}")
    segments = []
    for _ in range(seg_count):
        ip, port, cb = _SEGMENT.unpack_from(b, off)
        segments.append(Segment(socket.inet_ntoa(ip), port, cb))
        off += SEGMENT_SIZE
    address, length = _ADDR_LEN.unpack_from(b, off)
    off += _ADDR_LEN.size
    block_hash = None
    if hashed:
        (block_hash,) = _HASH.unpack_from(b, off)
        off += HASH_SIZE
    (payload_len,) = _PAYLOAD_LEN.unpack_from(b, off)
    off += _PAYLOAD_LEN.size
    if payload_len > MAX_PAYLOAD:
        raise InvariantViolation(f"payload_len {payload_len} exceeds {MAX_PAYLOAD}")
    remaining = len(b) - off
    if remaining < payload_len:
        raise Truncated(f"payload_len {payload_len}, {remaining} bytes remain")
    if remaining != payload_len:
        raise LengthMismatch(f"payload_len {payload_len}, {remaining} bytes remain")
    if dtype in (DType.INT32, DType.FLOAT32) and length % 4:
        raise InvariantViolation("length must be a multiple of 4 for 32-bit dtypes")
    return NetdamPacket(
        opcode=opcode,
        address=address,
        length=length,
        payload=b[off:],
        sequence=sequence,
        flags=flags,
        dtype=dtype,
        status=status,
        sr_stack=SegmentStack(tuple(segments), seg_left),
        block_hash=block_hash,
        version=version,
    )


def compute_block_hash(block: bytes) -> int:
    """FNV-1a 64-bit over ``block``."""
    h = FNV_OFFSET_BASIS
    for x in bytes(block):
        h = ((h ^ x) * FNV_PRIME) & _MASK64
    return h
