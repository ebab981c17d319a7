"""The NetDAM device: memory, instruction pipeline, queues, and chain forwarding."""

from __future__ import annotations

import collections
import dataclasses
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import isa
from .addressing import QUEUE_WINDOW, AclTable
from .isa import OpcodeEntry, Registry, Status
from .transport import CapacityExceeded, ReorderBuffer
from .wire import (
    CodecError,
    DType,
    Endpoint,
    Flag,
    NetdamPacket,
    compute_block_hash,
    decode_packet,
    encode_packet,
)

log = logging.getLogger(__name__)

CompletionStatus = Status

DEFAULT_MEM_SIZE = 64 * 1024 * 1024
DEFAULT_QUEUE_DEPTH = 1024

# Host-side command queue windows inside the reserved low region.
REQUEST_QUEUE_ADDR = 0x0000
COMPLETE_QUEUE_ADDR = QUEUE_WINDOW // 2

HOST_ENDPOINT: Endpoint = ("0.0.0.0", 0)

_CANONICAL_NAN = np.frombuffer(b"\x7f\xc0\x00\x00", dtype=">f4")[0]


@dataclass
class Outcome:
    """What a handler did.

    ``buffer`` replaces the packet payload when the chain continues (None
    keeps it); ``reply`` is the ACK payload; ``forward=False`` ends the chain.
    """

    status: Status = Status.OK
    buffer: Optional[bytes] = None
    reply: bytes = b""
    forward: bool = True


@dataclass
class DeviceStats:
    packets_in: int = 0
    packets_out: int = 0
    acks_out: int = 0
    forwarded: int = 0
    executed: collections.Counter = field(default_factory=collections.Counter)
    status: collections.Counter = field(default_factory=collections.Counter)
    drops: collections.Counter = field(default_factory=collections.Counter)
    latency_ns: dict = field(default_factory=dict)

    def record_latency(self, name: str, ns: int) -> None:
        entry = self.latency_ns.setdefault(name, {"count": 0, "total": 0, "max": 0})
        entry["count"] += 1
        entry["total"] += ns
        entry["max"] = max(entry["max"], ns)

    def to_dict(self) -> dict:
        return {
            "packets_in": self.packets_in,
            "packets_out": self.packets_out,
            "acks_out": self.acks_out,
            "forwarded": self.forwarded,
            "executed": dict(self.executed),
            "status": {Status(k).name: v for k, v in self.status.items()},
            "drops": dict(self.drops),
            "latency_ns": {
                k: {**v, "mean": v["total"] / v["count"]} for k, v in self.latency_ns.items()
            },
        }


# --- elementwise kernels --------------------------------------------------


def _np_dtype(dtype: int) -> str:
    return {DType.BYTE: "u1", DType.INT32: ">i4", DType.FLOAT32: ">f4"}[DType(dtype)]


def simd_apply(opcode: int, dtype: int, mem: bytes, operand: bytes) -> bytes:
    """Elementwise ``op(mem[i], operand[i])``; both inputs big-endian."""
    if opcode == isa.SIMD_XOR:
        a = np.frombuffer(mem, dtype=np.uint8)
        b = np.frombuffer(operand, dtype=np.uint8)
        return np.bitwise_xor(a, b).tobytes()
    dt = _np_dtype(dtype)
    a = np.frombuffer(mem, dtype=dt)
    b = np.frombuffer(operand, dtype=dt)
    with np.errstate(all="ignore"):
        if opcode == isa.SIMD_ADD:
            r = a + b
        elif opcode == isa.SIMD_SUB:
            r = a - b
        elif opcode == isa.SIMD_MUL:
            r = a * b
        elif opcode in (isa.SIMD_MIN, isa.SIMD_MAX):
            # Ties keep the memory operand; any NaN yields the canonical quiet NaN.
            pick = b < a if opcode == isa.SIMD_MIN else b > a
            r = np.where(pick, b, a)
            if dtype == DType.FLOAT32:
                r = np.where(np.isnan(a) | np.isnan(b), _CANONICAL_NAN, r)
        else:
            raise isa.UnknownOpcode(f"{opcode:#06x} is not a SIMD opcode")
    return np.asarray(r).astype(dt).tobytes()


# --- the device -----------------------------------------------------------


class Device:
    def __init__(
        self,
        mem_size: int = DEFAULT_MEM_SIZE,
        *,
        queue_depth: int = DEFAULT_QUEUE_DEPTH,
        registry: Registry | None = None,
        acl: AclTable | None = None,
        reorder_capacity: int = 256,
        name: str = "netdam",
    ) -> None:
        if mem_size < QUEUE_WINDOW:
            raise ValueError(f"mem_size must be at least the {QUEUE_WINDOW}-byte queue window")
        self.name = name
        self.mem_size = mem_size
        self.memory = bytearray(mem_size)
        self.queue_depth = queue_depth
        self.request_queue: collections.deque[NetdamPacket] = collections.deque()
        self.complete_queue: collections.deque[NetdamPacket] = collections.deque()
        self.registry = registry if registry is not None else default_registry()
        self.registry.freeze()
        self.acl = acl
        self.stats = DeviceStats()
        self.reorder_capacity = reorder_capacity
        self._reorder: dict[Endpoint, ReorderBuffer] = {}
        self._lock = threading.Lock()

    # -- memory helpers used by handlers

    def mem(self, addr: int, length: int) -> bytes:
        return bytes(self.memory[addr : addr + length])

    def store(self, addr: int, data: bytes) -> None:
        self.memory[addr : addr + len(data)] = data

    # -- packet intake

    def handle_datagram(self, data: bytes, source: Endpoint) -> list[tuple[Endpoint, bytes]]:
        try:
            packet = decode_packet(data)
        except CodecError as exc:
            self.stats.drops["decode_error"] += 1
            log.debug("%s: undecodable datagram from %s: %s", self.name, source, exc)
            return []
        return [(dst, encode_packet(p)) for dst, p in self.execute(packet, source)]

    def execute(self, packet: NetdamPacket, source: Endpoint = HOST_ENDPOINT, *, trusted: bool = False) -> list[tuple[Endpoint, NetdamPacket]]:
        """Run one packet; returns ``(destination, packet)`` pairs to send.

        Never raises for protocol-level failures: they become ACKs with a
        nonzero status.
        """
        with self._lock:
            self.stats.packets_in += 1
            if packet.is_ack:
                self.stats.drops["unexpected_ack"] += 1
                return []
            if packet.has(Flag.ORDERED):
                rb = self._reorder.get(source)
                if rb is None:
                    rb = self._reorder[source] = ReorderBuffer(capacity=self.reorder_capacity)
                dups = rb.duplicates
                try:
                    released = rb.deliver(packet)
                except CapacityExceeded:
                    self.stats.drops["reorder_overflow"] += 1
                    del self._reorder[source]
                    return []
                if rb.duplicates > dups:
                    self.stats.drops["reorder_duplicate"] += rb.duplicates - dups
                out = []
                for p in released:
                    out.extend(self._run(p, source, trusted))
                return out
            return self._run(packet, source, trusted)

    def _run(self, packet: NetdamPacket, source: Endpoint, trusted: bool) -> list[tuple[Endpoint, NetdamPacket]]:
        t0 = time.perf_counter_ns()
        try:
            entry = self.registry.lookup(packet.opcode)
        except isa.UnknownOpcode:
            return self._finish(packet, source, Outcome(Status.UNSUPPORTED, forward=False), "UNKNOWN", t0)
        if not trusted and self.acl is not None:
            if not self.acl.check(source[0], packet.opcode, packet.address, packet.length):
                return self._finish(packet, source, Outcome(Status.ACL_DENIED, forward=False), entry.name, t0)
        try:
            isa.validate(packet, entry, self.mem_size)
            outcome = entry.handler(self, packet)
        except isa.IsaError as exc:
            outcome = Outcome(exc.status, forward=False)
        return self._finish(packet, source, outcome, entry.name, t0)

    def _finish(self, packet: NetdamPacket, source: Endpoint, outcome: Outcome, name: str, t0: int) -> list[tuple[Endpoint, NetdamPacket]]:
        self.stats.executed[name] += 1
        self.stats.status[int(outcome.status)] += 1
        stack = packet.sr_stack
        if outcome.status == Status.OK and outcome.forward and stack.segments_left > 0:
            seg = stack.next_segment()
            fwd = dataclasses.replace(
                packet,
                sr_stack=stack.advance(),
                opcode=seg.callback_opcode or packet.opcode,
                payload=packet.payload if outcome.buffer is None else outcome.buffer,
            )
            self.stats.forwarded += 1
            self.stats.packets_out += 1
            self.stats.record_latency(name, time.perf_counter_ns() - t0)
            return [(seg.endpoint, fwd)]
        ack = NetdamPacket(
            opcode=packet.opcode,
            address=packet.address,
            length=packet.length,
            payload=outcome.reply,
            sequence=packet.sequence,
            flags=Flag.ACK | (packet.flags & (Flag.RELIABLE | Flag.ORDERED)),
            dtype=packet.dtype,
            status=int(outcome.status),
        )
        self.stats.acks_out += 1
        self.stats.packets_out += 1
        self.stats.record_latency(name, time.perf_counter_ns() - t0)
        return [(reply_endpoint(packet, source), ack)]

    # -- host-side command queues

    def mmio_write(self, addr: int, data: bytes) -> bool:
        """Host store. A store to the request-queue doorbell enqueues an encoded packet."""
        if addr == REQUEST_QUEUE_ADDR:
            if len(self.request_queue) >= self.queue_depth:
                self.stats.drops["request_queue_full"] += 1
                return False
            try:
                packet = decode_packet(data)
            except CodecError:
                self.stats.drops["decode_error"] += 1
                return False
            self.request_queue.append(packet)
            return True
        if addr < QUEUE_WINDOW:
            raise ValueError(f"address {addr:#x} is inside the queue window")
        with self._lock:
            self.store(addr, data)
        return True

    def mmio_read(self, addr: int, length: int = 0) -> bytes:
        """Host load. A load from the complete-queue address pops one encoded completion."""
        if addr == COMPLETE_QUEUE_ADDR:
            if not self.complete_queue:
                return b""
            return encode_packet(self.complete_queue.popleft())
        if addr < QUEUE_WINDOW:
            raise ValueError(f"address {addr:#x} is inside the queue window")
        with self._lock:
            return self.mem(addr, length)

    def process_request_queue(self) -> list[tuple[Endpoint, NetdamPacket]]:
        """Drain the request queue; completions go to the complete queue, the rest is returned."""
        outbound = []
        while self.request_queue:
            packet = self.request_queue.popleft()
            for dst, out in self.execute(packet, HOST_ENDPOINT, trusted=True):
                if out.is_ack and dst == HOST_ENDPOINT:
                    if len(self.complete_queue) >= self.queue_depth:
                        self.stats.drops["complete_queue_full"] += 1
                        continue
                    self.complete_queue.append(out)
                else:
                    outbound.append((dst, out))
        return outbound


def reply_endpoint(packet: NetdamPacket, source: Endpoint) -> Endpoint:
    segs = packet.sr_stack.segments
    if segs and segs[0].callback_opcode == isa.REPLY_TO:
        return segs[0].endpoint
    return source


# --- instruction handlers -------------------------------------------------


def op_read(dev: Device, p: NetdamPacket) -> Outcome:
    data = dev.mem(p.address, p.length)
    return Outcome(buffer=data, reply=data)


def op_write(dev: Device, p: NetdamPacket) -> Outcome:
    dev.store(p.address, p.payload)
    return Outcome()


def op_cas(dev: Device, p: NetdamPacket) -> Outcome:
    old = dev.mem(p.address, 8)
    if old == p.payload[:8]:
        dev.store(p.address, p.payload[8:16])
    return Outcome(buffer=old, reply=old)


def op_memcopy(dev: Device, p: NetdamPacket) -> Outcome:
    dst = int.from_bytes(p.payload[:8], "big")
    snapshot = dev.mem(p.address, p.length)
    dev.store(dst, snapshot)
    return Outcome()


def op_simd(dev: Device, p: NetdamPacket) -> Outcome:
    r = simd_apply(p.opcode, p.dtype, dev.mem(p.address, p.length), p.payload)
    if p.has(Flag.TARGET_PACKET):
        return Outcome(buffer=r, reply=r)
    dev.store(p.address, r)
    return Outcome()


def op_block_hash(dev: Device, p: NetdamPacket) -> Outcome:
    h = compute_block_hash(dev.mem(p.address, p.length)).to_bytes(8, "big")
    return Outcome(buffer=h, reply=h)


def op_reduce_scatter_step(dev: Device, p: NetdamPacket) -> Outcome:
    local = dev.mem(p.address, p.length)
    if p.sr_stack.segments_left > 0:
        if not p.payload:
            return Outcome(buffer=local)
        return Outcome(buffer=simd_apply(isa.SIMD_ADD, DType.FLOAT32, p.payload, local))
    h = compute_block_hash(local)
    if h != p.block_hash:
        return Outcome(Status.HASH_MISMATCH, reply=h.to_bytes(8, "big"), forward=False)
    total = simd_apply(isa.SIMD_ADD, DType.FLOAT32, p.payload, local)
    dev.store(p.address, total)
    return Outcome(reply=compute_block_hash(total).to_bytes(8, "big"))


def op_allgather_step(dev: Device, p: NetdamPacket) -> Outcome:
    if not p.payload:
        return Outcome(buffer=dev.mem(p.address, p.length))
    dev.store(p.address, p.payload)
    return Outcome()


BASE_ENTRIES = (
    OpcodeEntry(isa.READ, "READ", op_read, mutates_memory=False, idempotent=True),
    OpcodeEntry(isa.WRITE, "WRITE", op_write, mutates_memory=True, idempotent=True),
    OpcodeEntry(isa.CAS, "CAS", op_cas, mutates_memory=True, idempotent=True),
    OpcodeEntry(isa.MEMCOPY, "MEMCOPY", op_memcopy, mutates_memory=True, idempotent=False),
    OpcodeEntry(isa.SIMD_ADD, "SIMD_ADD", op_simd, mutates_memory=True, idempotent=False),
    OpcodeEntry(isa.SIMD_SUB, "SIMD_SUB", op_simd, mutates_memory=True, idempotent=False),
    OpcodeEntry(isa.SIMD_MUL, "SIMD_MUL", op_simd, mutates_memory=True, idempotent=False),
    OpcodeEntry(isa.SIMD_XOR, "SIMD_XOR", op_simd, mutates_memory=True, idempotent=False),
    OpcodeEntry(isa.SIMD_MIN, "SIMD_MIN", op_simd, mutates_memory=True, idempotent=True),
    OpcodeEntry(isa.SIMD_MAX, "SIMD_MAX", op_simd, mutates_memory=True, idempotent=True),
    OpcodeEntry(isa.BLOCK_HASH, "BLOCK_HASH", op_block_hash, mutates_memory=False, idempotent=True),
)

COLLECTIVE_ENTRIES = (
    OpcodeEntry(isa.REDUCE_SCATTER_STEP, "REDUCE_SCATTER_STEP", op_reduce_scatter_step, mutates_memory=True, idempotent=True),
    OpcodeEntry(isa.ALL_GATHER_STEP, "ALL_GATHER_STEP", op_allgather_step, mutates_memory=True, idempotent=True),
)


def default_registry(extensions: tuple[OpcodeEntry, ...] = ()) -> Registry:
    """Base instructions plus the collective extensions and any caller extras."""
    reg = Registry()
    for entry in BASE_ENTRIES:
        reg.register_base(entry)
    for entry in COLLECTIVE_ENTRIES + tuple(extensions):
        reg.register(entry)
    return reg
