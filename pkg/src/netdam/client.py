"""Blocking client API over a Requester, plus the latency bench."""

from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass

import numpy as np

from . import isa
from .addressing import PoolLayout, interleaved_read, interleaved_write, reassemble
from .transport import Exhausted, Requester, UdpCarrier, drive
from .wire import DType, Endpoint, Flag, NetdamPacket


class StatusError(RuntimeError):
    def __init__(self, ack: NetdamPacket, what: str = "") -> None:
        self.ack = ack
        self.status = isa.Status(ack.status)
        super().__init__(f"{self.status.name}{': ' + what if what else ''}")


def check(ack: NetdamPacket, what: str = "") -> NetdamPacket:
    if ack.status != isa.Status.OK:
        raise StatusError(ack, what)
    return ack


class NetdamClient:
    def __init__(self, requester: Requester) -> None:
        self.requester = requester

    @classmethod
    def udp(cls, local: Endpoint = ("127.0.0.1", 0), **kw) -> NetdamClient:
        return cls(Requester(UdpCarrier(local), **kw))

    def close(self) -> None:
        close = getattr(self.requester.carrier, "close", None)
        if close:
            close()

    def call(self, endpoint: Endpoint, packet: NetdamPacket, **kw) -> NetdamPacket:
        return self.requester.call(endpoint, packet, **kw)

    def read(self, endpoint: Endpoint, addr: int, length: int) -> NetdamPacket:
        return self.call(endpoint, NetdamPacket(opcode=isa.READ, address=addr, length=length))

    def write(self, endpoint: Endpoint, addr: int, data: bytes) -> NetdamPacket:
        return self.call(endpoint, NetdamPacket(opcode=isa.WRITE, address=addr, length=len(data), payload=bytes(data)))

    def cas(self, endpoint: Endpoint, addr: int, compare: int, swap: int) -> NetdamPacket:
        payload = compare.to_bytes(8, "big") + swap.to_bytes(8, "big")
        return self.call(endpoint, NetdamPacket(opcode=isa.CAS, address=addr, length=8, payload=payload))

    def memcopy(self, endpoint: Endpoint, src: int, dst: int, length: int) -> NetdamPacket:
        pkt = NetdamPacket(opcode=isa.MEMCOPY, address=src, length=length, payload=dst.to_bytes(8, "big"))
        return self.call(endpoint, pkt, reliable=False)

    def simd(
        self,
        endpoint: Endpoint,
        opcode: int,
        addr: int,
        operand: bytes,
        dtype: int = DType.FLOAT32,
        target_packet: bool = False,
    ) -> NetdamPacket:
        pkt = NetdamPacket(
            opcode=opcode,
            address=addr,
            length=len(operand),
            payload=bytes(operand),
            dtype=dtype,
            flags=Flag.TARGET_PACKET if target_packet else 0,
        )
        # Accumulate mode is not idempotent; only chain mode may be retransmitted.
        return self.call(endpoint, pkt, reliable=target_packet)

    def block_hash(self, endpoint: Endpoint, addr: int, length: int) -> int:
        ack = check(self.call(endpoint, NetdamPacket(opcode=isa.BLOCK_HASH, address=addr, length=length)))
        return int.from_bytes(ack.payload, "big")

    # -- pool access

    def pool_write(self, layout: PoolLayout, g: int, data: bytes) -> None:
        reqs = [
            self.requester.submit(layout.devices[op.device], op.packet)
            for op in interleaved_write(layout, g, data)
        ]
        drive([self.requester])
        for r in reqs:
            if r.ack is None:
                raise Exhausted(f"no ACK from {r.dest} for pool write", r)
            check(r.ack, f"write to {r.dest}")

    def pool_read(self, layout: PoolLayout, g: int, length: int) -> bytes:
        ops = interleaved_read(layout, g, length)
        reqs = [(op.global_offset, self.requester.submit(layout.devices[op.device], op.packet)) for op in ops]
        drive([self.requester])
        pieces = []
        for pos, r in reqs:
            if r.ack is None:
                raise Exhausted(f"no ACK from {r.dest} for pool read", r)
            pieces.append((pos, check(r.ack, f"read from {r.dest}").payload))
        return reassemble(g, length, pieces)


@dataclass
class BenchReport:
    op: str
    size: int
    count: int
    mean_us: float
    p50_us: float
    p99_us: float
    max_us: float
    jitter_us: float
    loss: int
    bandwidth_Bps: float

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return (
            f"{self.op} x{self.count} size={self.size}B: avg {self.mean_us:.1f}us "
            f"jitter {self.jitter_us:.1f}us p50 {self.p50_us:.1f}us p99 {self.p99_us:.1f}us "
            f"max {self.max_us:.1f}us loss {self.loss}"
        )


def report_from_latencies(op: str, size: int, latencies_s: list[float], loss: int, elapsed: float) -> BenchReport:
    us = np.asarray(latencies_s, dtype=float) * 1e6
    if us.size == 0:
        us = np.zeros(1)
    return BenchReport(
        op=op,
        size=size,
        count=len(latencies_s),
        mean_us=float(us.mean()),
        p50_us=float(np.percentile(us, 50)),
        p99_us=float(np.percentile(us, 99)),
        max_us=float(us.max()),
        jitter_us=float(statistics.pstdev(us.tolist())),
        loss=loss,
        bandwidth_Bps=size * len(latencies_s) / elapsed if elapsed > 0 else 0.0,
    )


def bench_latency(client: NetdamClient, endpoint: Endpoint, op: int = isa.READ, size: int = 128, count: int = 1000, address: int = 0) -> BenchReport:
    """Sequential round trips of ``size`` bytes; 128 B is 32 float32 values."""
    req = client.requester
    before = req.rt.retransmits
    latencies = []
    t0 = req.carrier.now()
    for _ in range(count):
        if op == isa.READ:
            pkt = NetdamPacket(opcode=isa.READ, address=address, length=size)
        elif op == isa.WRITE:
            pkt = NetdamPacket(opcode=isa.WRITE, address=address, length=size, payload=bytes(size))
        elif op in isa.SIMD_OPS:
            pkt = NetdamPacket(
                opcode=op, address=address, length=size, payload=bytes(size),
                dtype=DType.FLOAT32, flags=Flag.TARGET_PACKET,
            )
        else:
            raise ValueError(f"bench does not support opcode {op:#06x}")
        r = req.submit(endpoint, pkt)
        drive([req], until=lambda: r.ack is not None or r.exhausted)
        if r.ack is None:
            raise Exhausted(f"no ACK from {endpoint} after {r.attempts} attempts", r)
        check(r.ack, "bench request")
        latencies.append(r.done_at - r.first_sent)
    elapsed = req.carrier.now() - t0
    return report_from_latencies(isa.OPCODE_NAMES.get(op, hex(op)), size, latencies, req.rt.retransmits - before, elapsed)
