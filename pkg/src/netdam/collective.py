"""Ring reduce-scatter, ring all-gather and allreduce driven over chained packets.

Each chunk's reduce-scatter is one packet sent to the chunk's origin node
with an SR stack naming the other nodes in ring order. The origin loads
its slice, every hop adds its own slice in the packet buffer, and the last
hop adds its slice and writes the total only if its block hash still equals
the one the controller read just before launching the chain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import isa
from .addressing import QUEUE_WINDOW
from .transport import Request, Requester, drive
from .wire import MAX_PAYLOAD, DType, Endpoint, Flag, NetdamPacket, Segment, SegmentStack

log = logging.getLogger(__name__)

MAX_CHUNK_ELEMS = MAX_PAYLOAD // 4


class BadParams(ValueError):
    pass


class ChunkFailed(RuntimeError):
    def __init__(self, result: "CollectiveResult") -> None:
        failed = {c: s for c, s in result.chunk_status.items() if s != "OK"}
        super().__init__(f"{result.phase}: {len(failed)} chunk(s) failed: {dict(list(failed.items())[:8])}")
        self.result = result


class VerificationFailed(AssertionError):
    pass


@dataclass(frozen=True)
class Chunk:
    id: int
    elem_offset: int
    n_elems: int
    address: int
    origin: int
    route: tuple[int, ...]
    expected_hash: Optional[int] = None

    @property
    def nbytes(self) -> int:
        return 4 * self.n_elems

    @property
    def owner(self) -> int:
        """Node holding the reduced chunk after reduce-scatter."""
        return self.route[-1]

    @property
    def elems(self) -> slice:
        return slice(self.elem_offset, self.elem_offset + self.n_elems)


@dataclass(frozen=True)
class CollectivePlan:
    nodes: tuple[Endpoint, ...]
    vector_length: int
    chunk_elems: int
    base_address: int
    chunks: tuple[Chunk, ...]
    controller: Optional[Endpoint] = None

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def nbytes(self) -> int:
        return 4 * self.vector_length

    def ring_from(self, start: int) -> tuple[int, ...]:
        """The other nodes in ring order after ``start``."""
        return tuple((start + k) % self.n for k in range(1, self.n))


def plan_ring(
    nodes: Sequence[Endpoint],
    vector_length: int,
    chunk_elems: int = MAX_CHUNK_ELEMS,
    *,
    base_address: int = QUEUE_WINDOW,
    controller: Endpoint | None = None,
) -> CollectivePlan:
    nodes = tuple(tuple(n) for n in nodes)
    if len(nodes) < 2:
        raise BadParams("a ring needs at least 2 nodes")
    if len(set(nodes)) != len(nodes):
        raise BadParams("ring nodes must be distinct")
    if vector_length < 1:
        raise BadParams("vector_length must be at least 1")
    if not 1 <= chunk_elems <= MAX_CHUNK_ELEMS:
        raise BadParams(f"chunk_elems must be in [1, {MAX_CHUNK_ELEMS}]")
    if base_address < 0 or base_address % 4:
        raise BadParams("base_address must be a non-negative multiple of 4")
    n = len(nodes)
    chunks = []
    for c, off in enumerate(range(0, vector_length, chunk_elems)):
        size = min(chunk_elems, vector_length - off)
        origin = c % n
        route = tuple((origin + k) % n for k in range(1, n))
        chunks.append(Chunk(c, off, size, base_address + 4 * off, origin, route))
    return CollectivePlan(nodes, vector_length, chunk_elems, base_address, tuple(chunks), controller)


def chain_stack(plan: CollectivePlan, route: Sequence[int], opcode: int, reply_to: Endpoint) -> SegmentStack:
    segs = [Segment(reply_to[0], reply_to[1], isa.REPLY_TO)]
    segs += [Segment(plan.nodes[i][0], plan.nodes[i][1], opcode) for i in route]
    return SegmentStack(tuple(segs), len(route))


@dataclass
class CollectiveResult:
    phase: str
    chunk_status: dict[int, str] = field(default_factory=dict)
    retries: dict[int, int] = field(default_factory=dict)
    guarded_duplicates: int = 0
    hash_refreshes: int = 0
    elapsed: float = 0.0
    nbytes: int = 0

    @property
    def ok(self) -> bool:
        return bool(self.chunk_status) and all(s == "OK" for s in self.chunk_status.values())

    @property
    def total_retries(self) -> int:
        return sum(self.retries.values())

    @property
    def bandwidth(self) -> float:
        """Bytes reduced per second of (virtual or wall) clock."""
        return self.nbytes / self.elapsed if self.elapsed > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "ok": self.ok,
            "chunks": len(self.chunk_status),
            "failed": {str(c): s for c, s in self.chunk_status.items() if s != "OK"},
            "retries": self.total_retries,
            "guarded_duplicates": self.guarded_duplicates,
            "hash_refreshes": self.hash_refreshes,
            "elapsed_s": self.elapsed,
            "bytes": self.nbytes,
            "bandwidth_Bps": self.bandwidth,
        }


def _status_name(req: Request) -> str:
    if req.exhausted:
        return "EXHAUSTED"
    return isa.Status(req.ack.status).name


class _ReduceScatter:
    def __init__(self, plan: CollectivePlan, req: Requester, exclusive: bool, max_refresh: int) -> None:
        self.plan = plan
        self.req = req
        self.exclusive = exclusive
        self.max_refresh = max_refresh
        self.reply_to = plan.controller or req.carrier.local
        self.result = CollectiveResult("reduce_scatter", nbytes=plan.nbytes)
        self.refreshes: dict[int, int] = {}

    def start(self, chunk: Chunk) -> None:
        self.result.retries.setdefault(chunk.id, 0)
        pkt = NetdamPacket(opcode=isa.BLOCK_HASH, address=chunk.address, length=chunk.nbytes)
        self.req.submit(self.plan.nodes[chunk.owner], pkt, self._hashed, context=chunk)

    def _hashed(self, r: Request) -> None:
        chunk: Chunk = r.context
        self.result.retries[chunk.id] += r.attempts - 1
        if not r.ok:
            self.result.chunk_status[chunk.id] = _status_name(r)
            return
        h0 = int.from_bytes(r.ack.payload, "big")
        pkt = NetdamPacket(
            opcode=isa.REDUCE_SCATTER_STEP,
            address=chunk.address,
            length=chunk.nbytes,
            dtype=DType.FLOAT32,
            flags=Flag.HASH_PRESENT,
            block_hash=h0,
            sr_stack=chain_stack(self.plan, chunk.route, isa.REDUCE_SCATTER_STEP, self.reply_to),
        )
        self.req.submit(self.plan.nodes[chunk.origin], pkt, self._reduced, context=(chunk, h0))

    def _reduced(self, r: Request) -> None:
        chunk, h0 = r.context
        self.result.retries[chunk.id] += r.attempts - 1
        if r.ok:
            self.result.chunk_status[chunk.id] = "OK"
            return
        if not r.exhausted and r.ack.status == isa.Status.HASH_MISMATCH:
            current = int.from_bytes(r.ack.payload, "big")
            if self.exclusive and current != h0:
                # Only this chain writes the block, so a moved hash means an
                # earlier copy of the chain already landed.
                self.result.guarded_duplicates += 1
                self.result.chunk_status[chunk.id] = "OK"
                return
            n = self.refreshes.get(chunk.id, 0)
            if n < self.max_refresh:
                self.refreshes[chunk.id] = n + 1
                self.result.hash_refreshes += 1
                self.start(chunk)
                return
        self.result.chunk_status[chunk.id] = _status_name(r)


class _AllGather:
    def __init__(self, plan: CollectivePlan, req: Requester) -> None:
        self.plan = plan
        self.req = req
        self.reply_to = plan.controller or req.carrier.local
        self.result = CollectiveResult("all_gather", nbytes=plan.nbytes)

    def start(self, chunk: Chunk) -> None:
        route = self.plan.ring_from(chunk.owner)
        pkt = NetdamPacket(
            opcode=isa.ALL_GATHER_STEP,
            address=chunk.address,
            length=chunk.nbytes,
            dtype=DType.FLOAT32,
            sr_stack=chain_stack(self.plan, route, isa.ALL_GATHER_STEP, self.reply_to),
        )
        self.req.submit(self.plan.nodes[chunk.owner], pkt, self._done, context=chunk)

    def _done(self, r: Request) -> None:
        chunk: Chunk = r.context
        self.result.retries[chunk.id] = r.attempts - 1
        self.result.chunk_status[chunk.id] = _status_name(r)


def _run(phase, plan: CollectivePlan, requester: Requester, raise_on_failure: bool) -> CollectiveResult:
    t0 = requester.carrier.now()
    for chunk in plan.chunks:
        phase.start(chunk)
    drive([requester])
    result = phase.result
    result.elapsed = requester.carrier.now() - t0
    for chunk in plan.chunks:
        result.chunk_status.setdefault(chunk.id, "EXHAUSTED")
    if raise_on_failure and not result.ok:
        raise ChunkFailed(result)
    return result


def run_reduce_scatter(
    plan: CollectivePlan,
    requester: Requester,
    *,
    exclusive: bool = True,
    max_refresh: int = 4,
    raise_on_failure: bool = True,
) -> CollectiveResult:
    """Reduce every chunk onto its owner node.

    With ``exclusive`` (the collective owns the chunk regions) a
    HASH_MISMATCH whose reported hash differs from the launch hash is taken
    as an already-applied duplicate. Otherwise the hash is refreshed and the
    chain relaunched, at most ``max_refresh`` times per chunk.
    """
    return _run(_ReduceScatter(plan, requester, exclusive, max_refresh), plan, requester, raise_on_failure)


def run_allgather(plan: CollectivePlan, requester: Requester, *, raise_on_failure: bool = True) -> CollectiveResult:
    return _run(_AllGather(plan, requester), plan, requester, raise_on_failure)


@dataclass
class AllreduceResult:
    reduce_scatter: CollectiveResult
    all_gather: CollectiveResult

    @property
    def ok(self) -> bool:
        return self.reduce_scatter.ok and self.all_gather.ok

    @property
    def elapsed(self) -> float:
        return self.reduce_scatter.elapsed + self.all_gather.elapsed

    @property
    def total_retries(self) -> int:
        return self.reduce_scatter.total_retries + self.all_gather.total_retries

    def to_dict(self) -> dict:
        nbytes = self.reduce_scatter.nbytes
        return {
            "ok": self.ok,
            "elapsed_s": self.elapsed,
            "retries": self.total_retries,
            "bandwidth_Bps": nbytes / self.elapsed if self.elapsed > 0 else 0.0,
            "reduce_scatter": self.reduce_scatter.to_dict(),
            "all_gather": self.all_gather.to_dict(),
        }


def allreduce(plan: CollectivePlan, requester: Requester, **kw) -> AllreduceResult:
    rs = run_reduce_scatter(plan, requester, **kw)
    ag = run_allgather(plan, requester, raise_on_failure=kw.get("raise_on_failure", True))
    return AllreduceResult(rs, ag)


# --- loading, fetching, verification ------------------------------------


def load_vector(plan: CollectivePlan, requester: Requester, node: int, vector: np.ndarray) -> None:
    """WRITE ``vector`` (float32) to ``node`` at the plan's base address."""
    data = np.asarray(vector, dtype=">f4").tobytes()
    if len(data) != plan.nbytes:
        raise BadParams(f"vector has {len(data) // 4} elements, plan expects {plan.vector_length}")
    reqs = []
    for off in range(0, len(data), MAX_PAYLOAD):
        piece = data[off : off + MAX_PAYLOAD]
        pkt = NetdamPacket(opcode=isa.WRITE, address=plan.base_address + off, length=len(piece), payload=piece)
        reqs.append(requester.submit(plan.nodes[node], pkt))
    drive([requester])
    bad = [r for r in reqs if not r.ok]
    if bad:
        raise ChunkFailed(CollectiveResult("load", {i: _status_name(r) for i, r in enumerate(bad)}))


def fetch_vector(plan: CollectivePlan, requester: Requester, node: int) -> np.ndarray:
    reqs = []
    for off in range(0, plan.nbytes, MAX_PAYLOAD):
        size = min(MAX_PAYLOAD, plan.nbytes - off)
        pkt = NetdamPacket(opcode=isa.READ, address=plan.base_address + off, length=size)
        reqs.append(requester.submit(plan.nodes[node], pkt))
    drive([requester])
    bad = [r for r in reqs if not r.ok]
    if bad:
        raise ChunkFailed(CollectiveResult("fetch", {i: _status_name(r) for i, r in enumerate(bad)}))
    data = b"".join(r.ack.payload for r in reqs)
    return np.frombuffer(data, dtype=">f4").astype(np.float32)


def ring_oracle(plan: CollectivePlan, vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum with each chunk accumulated in ring order from its origin."""
    vecs = [np.asarray(v, dtype=np.float32) for v in vectors]
    out = np.empty(plan.vector_length, dtype=np.float32)
    for chunk in plan.chunks:
        acc = vecs[chunk.origin][chunk.elems].copy()
        for node in chunk.route:
            acc = np.add(acc, vecs[node][chunk.elems], dtype=np.float32)
        out[chunk.elems] = acc
    return out


def seeded_vectors(n: int, length: int, seed: int) -> list[np.ndarray]:
    """Per-node inputs; node i uses seed ``seed + i``."""
    return [
        np.random.default_rng(seed + i).standard_normal(length).astype(np.float32)
        for i in range(n)
    ]


def verify(plan: CollectivePlan, requester: Requester, vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Fetch every node's vector and demand bitwise equality with the ring oracle."""
    expected = ring_oracle(plan, vectors)
    for node in range(plan.n):
        got = fetch_vector(plan, requester, node)
        if got.view(np.uint32).tobytes() != expected.view(np.uint32).tobytes():
            bad = int(np.count_nonzero(got.view(np.uint32) != expected.view(np.uint32)))
            raise VerificationFailed(f"node {node}: {bad} element(s) differ from the ring-order oracle")
    return expected
