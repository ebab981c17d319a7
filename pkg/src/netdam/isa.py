"""Opcode space, result codes and operand validation."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

from .wire import MAX_PAYLOAD, DType, Flag, NetdamPacket

READ = 0x0001
WRITE = 0x0002
CAS = 0x0003
MEMCOPY = 0x0004
SIMD_ADD = 0x0010
SIMD_SUB = 0x0011
SIMD_MUL = 0x0012
SIMD_XOR = 0x0013
SIMD_MIN = 0x0014
SIMD_MAX = 0x0015
BLOCK_HASH = 0x0020
REDUCE_SCATTER_STEP = 0x0100
ALL_GATHER_STEP = 0x0101

# Callback opcode marking segments[0] as the reply endpoint rather than a hop.
# Never registered, so it cannot collide with a real callback.
REPLY_TO = 0x00FF

EXTENSION_BASE = 0x0100

SIMD_OPS = (SIMD_ADD, SIMD_SUB, SIMD_MUL, SIMD_XOR, SIMD_MIN, SIMD_MAX)
ARITH_SIMD_OPS = (SIMD_ADD, SIMD_SUB, SIMD_MUL, SIMD_MIN, SIMD_MAX)

OPCODE_NAMES = {
    READ: "READ",
    WRITE: "WRITE",
    CAS: "CAS",
    MEMCOPY: "MEMCOPY",
    SIMD_ADD: "SIMD_ADD",
    SIMD_SUB: "SIMD_SUB",
    SIMD_MUL: "SIMD_MUL",
    SIMD_XOR: "SIMD_XOR",
    SIMD_MIN: "SIMD_MIN",
    SIMD_MAX: "SIMD_MAX",
    BLOCK_HASH: "BLOCK_HASH",
    REDUCE_SCATTER_STEP: "REDUCE_SCATTER_STEP",
    ALL_GATHER_STEP: "ALL_GATHER_STEP",
}
OPCODES_BY_NAME = {name: op for op, name in OPCODE_NAMES.items()}


class Status(enum.IntEnum):
    OK = 0
    UNSUPPORTED = 1
    OUT_OF_BOUNDS = 2
    BAD_OPERANDS = 3
    ACL_DENIED = 4
    HASH_MISMATCH = 5
    QUEUE_FULL = 6


class IsaError(Exception):
    status = Status.BAD_OPERANDS


class DuplicateOpcode(IsaError):
    pass


class ReservedRange(IsaError):
    pass


class UnknownOpcode(IsaError):
    status = Status.UNSUPPORTED


class OutOfBounds(IsaError):
    status = Status.OUT_OF_BOUNDS


class BadDtype(IsaError):
    status = Status.BAD_OPERANDS


class BadOperands(IsaError):
    status = Status.BAD_OPERANDS


@dataclass(frozen=True)
class OpcodeEntry:
    """One instruction.

    ``handler(device, packet)`` returns an ``Outcome`` (see ``netdam.device``).
    ``check(packet, mem_size)`` may add operand rules beyond the bounds check.
    """

    opcode: int
    name: str
    handler: Callable
    mutates_memory: bool
    idempotent: bool
    check: Optional[Callable[[NetdamPacket, int], None]] = None


class Registry:
    def __init__(self) -> None:
        self._entries: dict[int, OpcodeEntry] = {}
        self._frozen = False

    def register(self, entry: OpcodeEntry) -> Registry:
        """Add an extension instruction (opcode 0x0100 and above)."""
        if entry.opcode < EXTENSION_BASE:
            raise ReservedRange(f"opcode {entry.opcode:#06x} is in the base range")
        return self._add(entry)

    def register_base(self, entry: OpcodeEntry) -> Registry:
        if entry.opcode >= EXTENSION_BASE or entry.opcode == REPLY_TO:
            raise ReservedRange(f"opcode {entry.opcode:#06x} is not a base opcode")
        return self._add(entry)

    def _add(self, entry: OpcodeEntry) -> Registry:
        if self._frozen:
            raise RuntimeError("registry is frozen once a device has started")
        if not 0 <= entry.opcode <= 0xFFFF:
            raise ReservedRange(f"opcode {entry.opcode} outside 16 bits")
        if entry.opcode in self._entries:
            raise DuplicateOpcode(f"opcode {entry.opcode:#06x} already registered")
        self._entries[entry.opcode] = entry
        return self

    def freeze(self) -> None:
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def lookup(self, opcode: int) -> OpcodeEntry:
        try:
            return self._entries[opcode]
        except KeyError:
            raise UnknownOpcode(f"opcode {opcode:#06x} not registered") from None

    def __contains__(self, opcode: int) -> bool:
        return opcode in self._entries

    def opcodes(self) -> list[int]:
        return sorted(self._entries)


def element_size(dtype: int) -> int:
    return 1 if dtype == DType.BYTE else 4


def _bounds(lo: int, length: int, mem_size: int, what: str = "range") -> None:
    if lo < 0 or length < 0 or lo + length > mem_size:
        raise OutOfBounds(f"{what} [{lo:#x}, {lo + length:#x}) outside device memory of {mem_size:#x}")


def _payload_matches(p: NetdamPacket) -> None:
    if len(p.payload) != p.length:
        raise BadOperands(f"payload of {len(p.payload)} bytes, length field {p.length}")


def _chain_payload(p: NetdamPacket) -> None:
    # An empty payload at the head of a chain loads the operand from memory.
    if p.payload and len(p.payload) != p.length:
        raise BadOperands(f"payload of {len(p.payload)} bytes, length field {p.length}")


def validate(packet: NetdamPacket, entry: OpcodeEntry, mem_size: int) -> None:
    """Raise an IsaError subclass if ``packet`` may not run on a device of ``mem_size`` bytes."""
    op = entry.opcode
    _bounds(packet.address, packet.length, mem_size)

    if op == READ or op == BLOCK_HASH:
        if packet.length > MAX_PAYLOAD:
            raise BadOperands(f"length {packet.length} exceeds {MAX_PAYLOAD}")
    elif op == WRITE:
        _payload_matches(packet)
    elif op == CAS:
        if packet.length != 8 or len(packet.payload) != 16:
            raise BadOperands("CAS needs length 8 and a 16-byte compare|swap payload")
    elif op == MEMCOPY:
        if len(packet.payload) < 8:
            raise BadOperands("MEMCOPY payload must start with an 8-byte destination")
        dst = int.from_bytes(packet.payload[:8], "big")
        _bounds(dst, packet.length, mem_size, "destination")
    elif op in SIMD_OPS:
        if op in ARITH_SIMD_OPS and packet.dtype not in (DType.INT32, DType.FLOAT32):
            raise BadDtype(f"{OPCODE_NAMES[op]} needs int32 or float32")
        _payload_matches(packet)
    elif op == REDUCE_SCATTER_STEP:
        if packet.dtype != DType.FLOAT32:
            raise BadDtype("REDUCE_SCATTER_STEP is float32 only")
        if packet.length > MAX_PAYLOAD:
            raise BadOperands(f"length {packet.length} exceeds {MAX_PAYLOAD}")
        _chain_payload(packet)
        if packet.sr_stack.segments_left == 0:
            if not packet.has(Flag.HASH_PRESENT):
                raise BadOperands("final reduce-scatter hop needs a block hash")
            if not packet.payload:
                raise BadOperands("final reduce-scatter hop needs a payload")
    elif op == ALL_GATHER_STEP:
        if packet.length > MAX_PAYLOAD:
            raise BadOperands(f"length {packet.length} exceeds {MAX_PAYLOAD}")
        _chain_payload(packet)

    if entry.check is not None:
        entry.check(packet, mem_size)
