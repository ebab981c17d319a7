"""Carriers (real UDP or a seeded simulated network) and the request machinery on top.

Everything client-side is a *session*: an object with ``carrier``,
``on_datagram(src, data)``, ``on_timer(now)``, ``next_deadline()`` and
``idle``. ``drive(sessions)`` pumps any number of sessions to completion,
on the simulated network's virtual clock or on the wall clock for UDP.
"""

from __future__ import annotations

import collections
import dataclasses
import heapq
import itertools
import json
import logging
import math
import random
import selectors
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import isa
from .wire import (
    MAX_DATAGRAM,
    CodecError,
    Endpoint,
    Flag,
    NetdamPacket,
    decode_packet,
    encode_packet,
)

log = logging.getLogger(__name__)

INF = math.inf

IDEMPOTENT_SAFE = frozenset(
    {isa.READ, isa.WRITE, isa.CAS, isa.BLOCK_HASH, isa.ALL_GATHER_STEP, isa.REDUCE_SCATTER_STEP}
)


class TransportError(Exception):
    pass


class EncodeError(TransportError):
    pass


class Exhausted(TransportError):
    def __init__(self, msg: str, request: Optional["Request"] = None) -> None:
        super().__init__(msg)
        self.request = request


class CapacityExceeded(TransportError):
    pass


# --- simulated network ----------------------------------------------------


@dataclass
class SimNetConfig:
    loss: float = 0.0
    reorder: float = 0.0
    duplicate: float = 0.0
    delay_ms: float = 0.1
    jitter_ms: float = 0.02
    reorder_ms: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("loss", "reorder", "duplicate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.delay_ms < 0 or self.jitter_ms < 0 or self.reorder_ms < 0:
            raise ValueError("delays must be non-negative")

    @classmethod
    def from_mapping(cls, data: dict) -> SimNetConfig:
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


_PEEK = struct.Struct("!5xB10xQH")


def _peek(data: bytes) -> tuple[int, int, int]:
    """(flags, sequence, opcode) of a frame, or -1s if it is too short."""
    if len(data) < _PEEK.size:
        return -1, -1, -1
    return _PEEK.unpack_from(data)


class SimNetwork:
    """Deterministic in-process datagram network on a virtual clock (seconds)."""

    def __init__(self, config: SimNetConfig | None = None, *, trace: bool = True) -> None:
        self.config = config or SimNetConfig()
        self.rng = random.Random(self.config.seed)
        self.now = 0.0
        self._events: list[tuple[float, int, Endpoint, Endpoint, bytes]] = []
        self._tiebreak = itertools.count()
        self._devices: dict[Endpoint, object] = {}
        self._carriers: dict[Endpoint, SimCarrier] = {}
        self.tracing = trace
        self.trace: list[tuple] = []
        self.counters: collections.Counter = collections.Counter()

    def attach_device(self, endpoint: Endpoint, device) -> None:
        """``device.handle_datagram(data, src)`` runs on delivery; its outputs are sent on."""
        endpoint = tuple(endpoint)
        if endpoint in self._devices or endpoint in self._carriers:
            raise ValueError(f"endpoint {endpoint} already attached")
        self._devices[endpoint] = device

    def carrier(self, endpoint: Endpoint) -> SimCarrier:
        endpoint = tuple(endpoint)
        if endpoint in self._devices or endpoint in self._carriers:
            raise ValueError(f"endpoint {endpoint} already attached")
        c = SimCarrier(self, endpoint)
        self._carriers[endpoint] = c
        return c

    def _record(self, event: str, src: Endpoint, dst: Endpoint, data: bytes) -> None:
        self.counters[event] += 1
        if self.tracing:
            flags, seq, opcode = _peek(data)
            self.trace.append((round(self.now, 9), event, src, dst, seq, opcode, flags, len(data)))

    def send(self, src: Endpoint, dst: Endpoint, data: bytes) -> None:
        if len(data) > MAX_DATAGRAM:
            raise EncodeError(f"datagram of {len(data)} bytes exceeds {MAX_DATAGRAM}")
        dst = tuple(dst)
        cfg, r = self.config, self.rng
        self._record("send", src, dst, data)
        if r.random() < cfg.loss:
            self._record("drop", src, dst, data)
            return
        copies = 2 if r.random() < cfg.duplicate else 1
        for i in range(copies):
            delay = cfg.delay_ms + cfg.jitter_ms * r.random()
            if r.random() < cfg.reorder:
                delay += cfg.reorder_ms * r.random()
            if i:
                self._record("dup", src, dst, data)
            heapq.heappush(self._events, (self.now + delay / 1000.0, next(self._tiebreak), src, dst, data))

    def next_event_time(self) -> float:
        return self._events[0][0] if self._events else INF

    def step(self) -> bool:
        """Deliver the next datagram; False if nothing is in flight."""
        if not self._events:
            return False
        t, _, src, dst, data = heapq.heappop(self._events)
        self.now = max(self.now, t)
        self._record("deliver", src, dst, data)
        device = self._devices.get(dst)
        if device is not None:
            for out_dst, out in device.handle_datagram(data, src):
                self.send(dst, out_dst, out)
            return True
        carrier = self._carriers.get(dst)
        if carrier is not None:
            carrier.inbox.append((src, data))
        else:
            self._record("unroutable", src, dst, data)
        return True

    def run_until(self, t: float) -> None:
        while self._events and self._events[0][0] <= t:
            self.step()
        self.now = max(self.now, t)

    def drain(self) -> None:
        """Deliver everything in flight, including whatever deliveries cause."""
        while self.step():
            pass

    def drive(self, sessions: Sequence, until: Callable[[], bool] | None = None, max_time: float = INF) -> None:
        sessions = list(sessions)
        by_endpoint = {s.carrier.local: s for s in sessions}
        while True:
            for ep, s in by_endpoint.items():
                inbox = self._carriers[ep].inbox
                while inbox:
                    src, data = inbox.popleft()
                    s.on_datagram(src, data)
            if until is not None:
                if until():
                    return
            elif all(s.idle for s in sessions):
                return
            t_evt = self.next_event_time()
            t_dl = min((s.next_deadline() for s in sessions), default=INF)
            if t_evt == INF and t_dl == INF:
                return
            if t_dl < t_evt:
                if t_dl > max_time:
                    self.now = max(self.now, max_time)
                    return
                self.now = max(self.now, t_dl)
                for s in sessions:
                    s.on_timer(self.now)
            else:
                if t_evt > max_time:
                    self.now = max(self.now, max_time)
                    return
                self.step()

    def trace_lines(self) -> list[str]:
        keys = ("time", "event", "src", "dst", "sequence", "opcode", "flags", "size")
        return [json.dumps(dict(zip(keys, rec))) for rec in self.trace]

    def dump_trace(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.trace_lines():
                fh.write(line + "\n")


class SimCarrier:
    default_timeout = 0.05

    def __init__(self, net: SimNetwork, local: Endpoint) -> None:
        self.net = net
        self.local = local
        self.inbox: collections.deque[tuple[Endpoint, bytes]] = collections.deque()
        self.decode_errors = 0

    def now(self) -> float:
        return self.net.now

    def send_bytes(self, endpoint: Endpoint, data: bytes) -> None:
        self.net.send(self.local, endpoint, data)

    def send(self, endpoint: Endpoint, packet: NetdamPacket) -> None:
        self.send_bytes(endpoint, _encode(packet))

    def recv(self, timeout: float) -> tuple[Endpoint, NetdamPacket] | None:
        """Advance the virtual clock until a decodable datagram arrives or ``timeout`` passes."""
        deadline = self.net.now + timeout
        while True:
            while self.inbox:
                src, data = self.inbox.popleft()
                try:
                    return src, decode_packet(data)
                except CodecError:
                    self.decode_errors += 1
            if self.net.next_event_time() > deadline:
                self.net.now = max(self.net.now, deadline)
                return None
            self.net.step()

    def close(self) -> None:
        self.net._carriers.pop(self.local, None)


class UdpCarrier:
    default_timeout = 0.2

    def __init__(self, local: Endpoint = ("127.0.0.1", 0)) -> None:
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        self.sock.bind(tuple(local))
        self.local = self.sock.getsockname()
        self.decode_errors = 0

    def now(self) -> float:
        return time.monotonic()

    def send_bytes(self, endpoint: Endpoint, data: bytes) -> None:
        if len(data) > MAX_DATAGRAM:
            raise EncodeError(f"datagram of {len(data)} bytes exceeds {MAX_DATAGRAM}")
        self.sock.sendto(data, tuple(endpoint))

    def send(self, endpoint: Endpoint, packet: NetdamPacket) -> None:
        self.send_bytes(endpoint, _encode(packet))

    def recv_bytes(self, timeout: float | None) -> tuple[Endpoint, bytes] | None:
        self.sock.settimeout(timeout)
        try:
            data, src = self.sock.recvfrom(65535)
        except (socket.timeout, BlockingIOError):
            return None
        except ConnectionRefusedError:
            # ICMP port unreachable from an earlier send; treat as loss.
            return None
        return src, data

    def recv(self, timeout: float) -> tuple[Endpoint, NetdamPacket] | None:
        deadline = time.monotonic() + timeout
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                return None
            got = self.recv_bytes(left)
            if got is None:
                return None
            try:
                return got[0], decode_packet(got[1])
            except CodecError:
                self.decode_errors += 1

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> UdpCarrier:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _encode(packet: NetdamPacket) -> bytes:
    try:
        data = encode_packet(packet)
    except CodecError as exc:
        raise EncodeError(str(exc)) from exc
    if len(data) > MAX_DATAGRAM:
        raise EncodeError(f"encoded packet of {len(data)} bytes exceeds {MAX_DATAGRAM}")
    return data


def send(carrier, endpoint: Endpoint, packet: NetdamPacket) -> None:
    carrier.send(endpoint, packet)


def recv(carrier, timeout: float | None = None):
    return carrier.recv(carrier.default_timeout if timeout is None else timeout)


# --- requests and retransmission -----------------------------------------


@dataclass(eq=False)
class Request:
    dest: Endpoint
    packet: NetdamPacket
    callback: Optional[Callable[["Request"], None]]
    max_attempts: int
    attempts: int = 0
    deadline: float = INF
    first_sent: float = 0.0
    done_at: float = 0.0
    ack: Optional[NetdamPacket] = None
    exhausted: bool = False
    context: object = None

    @property
    def sequence(self) -> int:
        return self.packet.sequence

    @property
    def ok(self) -> bool:
        return self.ack is not None and self.ack.status == isa.Status.OK

    @property
    def status(self) -> int | None:
        return None if self.ack is None else self.ack.status


@dataclass
class RetransmitState:
    """Pending table keyed by sequence, plus timeout policy."""

    timeout: float = 0.05
    max_attempts: int = 8
    pending: dict[int, Request] = field(default_factory=dict)
    retransmits: int = 0
    exhausted: int = 0


class Requester:
    """Client session: numbers requests, matches ACKs by sequence, retransmits on timeout."""

    def __init__(
        self,
        carrier,
        *,
        timeout: float | None = None,
        max_attempts: int = 8,
        window: int | None = None,
        rt: RetransmitState | None = None,
        first_sequence: int = 1,
    ) -> None:
        self.carrier = carrier
        self.rt = rt or RetransmitState(
            timeout=carrier.default_timeout if timeout is None else timeout,
            max_attempts=max_attempts,
        )
        self.window = window
        self._seq = itertools.count(first_sequence)
        self._timers: list[tuple[float, int, int]] = []
        self.backlog: collections.deque[Request] = collections.deque()
        self.stray_acks = 0
        self.completed = 0

    # -- submission

    def next_sequence(self) -> int:
        return next(self._seq)

    def submit(
        self,
        dest: Endpoint,
        packet: NetdamPacket,
        callback: Callable[[Request], None] | None = None,
        *,
        reliable: bool = True,
        max_attempts: int | None = None,
        sequence: int | None = None,
        context: object = None,
    ) -> Request:
        flags = int(packet.flags | Flag.RELIABLE) if reliable else int(packet.flags & ~Flag.RELIABLE & 0xFF)
        seq = self.next_sequence() if sequence is None else sequence
        packet = _replace(packet, sequence=seq, flags=flags)
        attempts = (max_attempts or self.rt.max_attempts) if reliable else 1
        req = Request(tuple(dest), packet, callback, attempts, context=context)
        if self.window is not None and len(self.rt.pending) >= self.window:
            self.backlog.append(req)
        else:
            self._launch(req)
        return req

    def _launch(self, req: Request) -> None:
        now = self.carrier.now()
        req.first_sent = now
        self.rt.pending[req.sequence] = req
        self._transmit(req, now)

    def _transmit(self, req: Request, now: float) -> None:
        req.attempts += 1
        req.deadline = now + self.rt.timeout
        heapq.heappush(self._timers, (req.deadline, req.sequence, req.attempts))
        self.carrier.send(req.dest, req.packet)

    def _retransmit(self, req: Request, now: float) -> None:
        self.rt.retransmits += 1
        self._transmit(req, now)

    def _fill_window(self) -> None:
        while self.backlog and (self.window is None or len(self.rt.pending) < self.window):
            self._launch(self.backlog.popleft())

    def resend(self, req: Request, packet: NetdamPacket | None = None) -> None:
        """Send ``req`` again now, optionally with a new packet under the same sequence."""
        if packet is not None:
            req.packet = _replace(packet, sequence=req.sequence, flags=req.packet.flags)
        self._retransmit(req, self.carrier.now())

    # -- session interface

    def on_datagram(self, src: Endpoint, data: bytes) -> None:
        try:
            packet = decode_packet(data)
        except CodecError:
            self.carrier.decode_errors += 1
            return
        if not packet.is_ack:
            self.stray_acks += 1
            return
        req = self.rt.pending.get(packet.sequence)
        if req is None:
            self.stray_acks += 1
            return
        if not self.accept(req, packet):
            return
        del self.rt.pending[packet.sequence]
        req.ack = packet
        req.done_at = self.carrier.now()
        self.completed += 1
        self._fill_window()
        if req.callback is not None:
            req.callback(req)
        self._fill_window()

    def accept(self, req: Request, ack: NetdamPacket) -> bool:
        """Hook: return False to ignore an ACK and keep waiting (retransmission continues)."""
        return True

    def on_timer(self, now: float) -> None:
        while self._timers and self._timers[0][0] <= now:
            _, seq, attempt = heapq.heappop(self._timers)
            req = self.rt.pending.get(seq)
            if req is None or req.attempts != attempt:
                continue
            if req.attempts < req.max_attempts:
                self._retransmit(req, now)
            else:
                del self.rt.pending[seq]
                req.exhausted = True
                req.done_at = now
                self.rt.exhausted += 1
                self._fill_window()
                if req.callback is not None:
                    req.callback(req)
                self._fill_window()

    def next_deadline(self) -> float:
        while self._timers:
            t, seq, attempt = self._timers[0]
            req = self.rt.pending.get(seq)
            if req is not None and req.attempts == attempt:
                return t
            heapq.heappop(self._timers)
        return INF

    @property
    def idle(self) -> bool:
        return not self.rt.pending and not self.backlog

    # -- blocking convenience

    def call(self, dest: Endpoint, packet: NetdamPacket, **kw) -> NetdamPacket:
        """Submit one request and drive until its ACK; raises Exhausted."""
        req = self.submit(dest, packet, **kw)
        drive([self], until=lambda: req.ack is not None or req.exhausted)
        if req.ack is None:
            raise Exhausted(
                f"no ACK for sequence {req.sequence} from {req.dest} after {req.attempts} attempts", req
            )
        return req.ack


def _replace(packet: NetdamPacket, **changes) -> NetdamPacket:
    return dataclasses.replace(packet, **changes)


def reliable_request(
    rt: RetransmitState,
    carrier,
    endpoint: Endpoint,
    packet: NetdamPacket,
    *,
    override: bool = False,
) -> NetdamPacket:
    """Send ``packet`` until an ACK with its sequence arrives.

    Only idempotent-safe opcodes are accepted unless ``override`` is set;
    a REDUCE_SCATTER_STEP counts as safe only when it carries a block hash.
    """
    safe = packet.opcode in IDEMPOTENT_SAFE and (
        packet.opcode != isa.REDUCE_SCATTER_STEP or packet.has(Flag.HASH_PRESENT)
    )
    if not safe and not override:
        raise ValueError(f"opcode {packet.opcode:#06x} is not safe to retransmit")
    return Requester(carrier, rt=rt).call(endpoint, packet)


# --- driving sessions -----------------------------------------------------


def drive(sessions: Iterable, until: Callable[[], bool] | None = None, max_time: float | None = None) -> None:
    """Run sessions until ``until()`` holds or (by default) all are idle.

    ``max_time`` is an absolute clock value on the sessions' clock.
    """
    sessions = list(sessions)
    if not sessions:
        return
    limit = INF if max_time is None else max_time
    first = sessions[0].carrier
    if isinstance(first, SimCarrier):
        if any(not isinstance(s.carrier, SimCarrier) or s.carrier.net is not first.net for s in sessions):
            raise TransportError("cannot mix carriers from different networks in one drive")
        first.net.drive(sessions, until=until, max_time=limit)
        return
    _drive_udp(sessions, until, limit)


def _drive_udp(sessions: list, until, limit: float) -> None:
    sel = selectors.DefaultSelector()
    for s in sessions:
        s.carrier.sock.setblocking(False)
        sel.register(s.carrier.sock, selectors.EVENT_READ, s)
    try:
        while True:
            if until is not None:
                if until():
                    return
            elif all(s.idle for s in sessions):
                return
            now = time.monotonic()
            if now >= limit:
                return
            t_dl = min((s.next_deadline() for s in sessions), default=INF)
            wait = min(max(0.0, t_dl - now), 0.1, max(0.0, limit - now))
            for key, _ in sel.select(wait):
                s = key.data
                while True:
                    try:
                        data, src = s.carrier.sock.recvfrom(65535)
                    except (BlockingIOError, InterruptedError):
                        break
                    except ConnectionRefusedError:
                        continue
                    s.on_datagram(src, data)
            now = time.monotonic()
            for s in sessions:
                if s.next_deadline() <= now:
                    s.on_timer(now)
    finally:
        sel.close()
        for s in sessions:
            try:
                s.carrier.sock.setblocking(True)
            except OSError:
                pass


# --- ordering -------------------------------------------------------------


class ReorderBuffer:
    """Releases packets in strictly increasing sequence starting at ``expected``."""

    def __init__(self, capacity: int = 256, expected: int = 1) -> None:
        self.capacity = capacity
        self.expected = expected
        self.holdback: dict[int, NetdamPacket] = {}
        self.duplicates = 0
        self.evictions = 0

    def deliver(self, packet: NetdamPacket) -> list[NetdamPacket]:
        seq = packet.sequence
        if seq < self.expected or seq in self.holdback:
            self.duplicates += 1
            return []
        if seq != self.expected:
            if len(self.holdback) >= self.capacity:
                self.holdback.clear()
                self.evictions += 1
                raise CapacityExceeded(f"holdback full waiting for sequence {self.expected}")
            self.holdback[seq] = packet
            return []
        released = [packet]
        self.expected += 1
        while self.expected in self.holdback:
            released.append(self.holdback.pop(self.expected))
            self.expected += 1
        return released


def reorder_deliver(rb: ReorderBuffer, packet: NetdamPacket) -> list[NetdamPacket]:
    return rb.deliver(packet)


# --- rate-limited pulls ---------------------------------------------------

_EPS = 1e-9


class TokenBucket:
    def __init__(self, rate: float, burst: int, now: float = 0.0) -> None:
        if rate <= 0 or burst < 1:
            raise ValueError("rate must be positive and burst at least 1")
        self.rate = float(rate)
        self.burst = burst
        self.tokens = float(burst)
        self.last = now

    def _refill(self, now: float) -> None:
        if now > self.last:
            self.tokens = min(float(self.burst), self.tokens + (now - self.last) * self.rate)
            self.last = now

    def try_take(self, now: float) -> bool:
        self._refill(now)
        if self.tokens >= 1.0 - _EPS:
            self.tokens -= 1.0
            return True
        return False

    def next_available(self, now: float) -> float:
        self._refill(now)
        if self.tokens >= 1.0 - _EPS:
            return now
        return self.last + (1.0 - self.tokens) / self.rate


def bucket_violations(times: Sequence[float], rate: float, burst: int, tol: float = 1e-6) -> list[tuple[int, int]]:
    """Index pairs (i, j) where issues in [t_i, t_j] exceed ``rate*(t_j-t_i) + burst``."""
    ts = sorted(times)
    bad = []
    for i in range(len(ts)):
        for j in range(i, len(ts)):
            if j - i + 1 > rate * (ts[j] - ts[i]) + burst + tol:
                bad.append((i, j))
    return bad


@dataclass
class PullScheduler:
    """Token bucket plus the issue trace of one receiving host."""

    rate: float
    burst: int
    trace: list[tuple[float, int, int]] = field(default_factory=list)
    bucket: Optional[TokenBucket] = None
    max_outstanding_per_device: collections.Counter = field(default_factory=collections.Counter)

    def reset(self, now: float) -> None:
        self.bucket = TokenBucket(self.rate, self.burst, now)
        self.trace.clear()
        self.max_outstanding_per_device.clear()

    def issue_times(self) -> list[float]:
        return [t for t, _, _ in self.trace]


class Puller(Requester):
    """Receiver-driven read of a global range, one READ per block, paced by a token bucket.

    At most ``burst`` READs are outstanding; retransmissions also spend tokens.
    """

    def __init__(self, carrier, layout, scheduler: PullScheduler, **kw) -> None:
        kw.setdefault("window", None)
        super().__init__(carrier, **kw)
        self.layout = layout
        self.scheduler = scheduler
        self.queue: collections.deque = collections.deque()
        self.retry: collections.deque[Request] = collections.deque()
        self.pieces: dict[int, bytes] = {}
        self.outstanding: collections.Counter = collections.Counter()
        self.failed: list[Request] = []
        self.g = 0
        self.length = 0

    def start(self, g: int, length: int) -> None:
        from .addressing import split_range

        self.scheduler.reset(self.carrier.now())
        self.g, self.length = g, length
        self.pieces.clear()
        for dev, local, pos, size in split_range(self.layout, g, length, max_piece=self.layout.block_size):
            pkt = NetdamPacket(opcode=isa.READ, address=self.layout.device_address(local), length=size)
            self.queue.append((dev, pos, pkt))
        self._pump(self.carrier.now())

    def _in_flight(self) -> int:
        return sum(self.outstanding.values())

    def _pump(self, now: float) -> None:
        bucket = self.scheduler.bucket
        while (self.retry or self.queue) and self._in_flight() - len(self.retry) < self.scheduler.burst:
            if not bucket.try_take(now):
                break
            if self.retry:
                req = self.retry.popleft()
                self.scheduler.trace.append((now, req.context[0], req.sequence))
                self.rt.retransmits += 1
                self._transmit(req, now)
                continue
            dev, pos, pkt = self.queue.popleft()
            self.outstanding[dev] += 1
            peak = self.scheduler.max_outstanding_per_device
            peak[dev] = max(peak[dev], self.outstanding[dev])
            req = self.submit(self.layout.devices[dev], pkt, self._done, context=(dev, pos))
            self.scheduler.trace.append((now, dev, req.sequence))

    def _retransmit(self, req: Request, now: float) -> None:
        # Resends wait for a token like first sends.
        req.deadline = INF
        self.retry.append(req)
        self._pump(now)

    def _done(self, req: Request) -> None:
        dev, pos = req.context
        self.outstanding[dev] -= 1
        if req in self.retry:
            self.retry.remove(req)
        if req.ok:
            self.pieces[pos] = req.ack.payload
        else:
            self.failed.append(req)
        self._pump(self.carrier.now())

    def on_timer(self, now: float) -> None:
        super().on_timer(now)
        self._pump(now)

    def next_deadline(self) -> float:
        t = super().next_deadline()
        if (self.retry or self.queue) and self._in_flight() - len(self.retry) < self.scheduler.burst:
            t = min(t, self.scheduler.bucket.next_available(self.carrier.now()))
        return t

    @property
    def idle(self) -> bool:
        return super().idle and not self.queue and not self.retry

    def result(self) -> bytes:
        from .addressing import reassemble

        if self.failed:
            req = self.failed[0]
            if req.exhausted:
                raise Exhausted(f"block at global {req.context[1]:#x} never answered", req)
            raise TransportError(f"block at global {req.context[1]:#x} failed with status {req.status}")
        return reassemble(self.g, self.length, self.pieces.items())


def pull_read(ps: PullScheduler, layout, g: int, length: int, carrier, **kw) -> bytes:
    puller = Puller(carrier, layout, ps, **kw)
    puller.start(g, length)
    drive([puller])
    return puller.result()
