"""The nine acceptance criteria, each at its stated scale and tolerance.

Every test appends one ``PASS``/``FAIL`` line to ``RESULTS``; the conftest
prints them in the terminal summary. Run this file directly to print them
without pytest.
"""

from __future__ import annotations

import contextlib
import ipaddress
import random
import time

import oracles
from harness import Cluster, vector_mem
from netdam import collective, isa
from netdam.addressing import AclTable, PoolLayout, parse_acl
from netdam.device import Device
from netdam.transport import Puller, PullScheduler, SimNetConfig, SimNetwork, bucket_violations, drive
from netdam.wire import (
    KNOWN_FLAGS,
    MAX_DATAGRAM,
    CodecError,
    DType,
    Flag,
    NetdamPacket,
    Segment,
    SegmentStack,
    decode_packet,
    encode_packet,
)

RESULTS: list[str] = []


class _Line:
    detail = ""


@contextlib.contextmanager
def criterion(number: int, title: str):
    line = _Line()
    t0 = time.perf_counter()
    try:
        yield line
    except BaseException as exc:
        RESULTS.append(f"[{number}] FAIL {title}: {type(exc).__name__}: {str(exc)[:160]}")
        raise
    RESULTS.append(f"[{number}] PASS {title} ({time.perf_counter() - t0:.1f}s) {line.detail}".rstrip())


# --- 1: codec ---------------------------------------------------------------


def _random_packet(r: random.Random) -> NetdamPacket:
    n_seg = r.choice((0, 0, 1, 2, r.randint(0, 16)))
    segs = tuple(
        Segment(".".join(str(r.randrange(256)) for _ in range(4)), r.randrange(1 << 16), r.randrange(1 << 16))
        for _ in range(n_seg)
    )
    dtype = r.randrange(3)
    length = r.randrange(1 << 32)
    if dtype:
        length -= length % 4
    flags = r.randrange(KNOWN_FLAGS + 1)
    return NetdamPacket(
        opcode=r.randrange(1 << 16),
        address=r.randrange(1 << 64),
        length=length,
        payload=r.randbytes(r.choice((0, r.randrange(64), r.randrange(8193)))),
        sequence=r.randrange(1 << 64),
        flags=flags,
        dtype=dtype,
        status=r.randrange(256),
        sr_stack=SegmentStack(segs, r.randint(0, n_seg)),
        block_hash=r.randrange(1 << 64) if flags & Flag.HASH_PRESENT else None,
    )


def _mutate(r: random.Random, frame: bytes) -> bytes:
    b = bytearray(frame)
    kind = r.randrange(4)
    if kind == 0 and b:
        for _ in range(r.randint(1, 8)):
            b[r.randrange(len(b))] ^= 1 << r.randrange(8)
    elif kind == 1:
        b = b[: r.randrange(len(b) + 1)]
    elif kind == 2:
        b += r.randbytes(r.randint(1, 64))
    else:
        at = r.randrange(len(b) + 1)
        b = b[:at] + r.randbytes(r.randint(0, 32)) + b[at + r.randint(0, 32) :]
    return bytes(b[:MAX_DATAGRAM])


def test_c1_codec_round_trip_and_fuzz():
    with criterion(1, "codec soundness: 1e5 round trips + 1e5 fuzz inputs") as line:
        r = random.Random(1)
        t0 = time.perf_counter()
        frames = []
        for _ in range(100_000):
            p = _random_packet(r)
            data = encode_packet(p)
            assert decode_packet(data) == p
            if len(frames) < 2000:
                frames.append(data)
        rejected = 0
        for i in range(100_000):
            data = r.randbytes(r.randrange(MAX_DATAGRAM + 1)) if i % 3 == 0 else _mutate(r, r.choice(frames))
            try:
                decode_packet(data)
            except CodecError:
                rejected += 1
        elapsed = time.perf_counter() - t0
        assert elapsed < 60, f"took {elapsed:.1f}s"
        line.detail = f"fuzz rejected={rejected}"


# --- 2: ISA oracle ------------------------------------------------------------

_SIMD = {
    "add": isa.SIMD_ADD, "sub": isa.SIMD_SUB, "mul": isa.SIMD_MUL,
    "min": isa.SIMD_MIN, "max": isa.SIMD_MAX, "xor": isa.SIMD_XOR,
}
_DTYPES = {"byte": DType.BYTE, "int32": DType.INT32, "float32": DType.FLOAT32}


def _operand(r: random.Random, n: int, dtype: str) -> bytes:
    if dtype != "float32" or r.random() < 0.3:
        return r.randbytes(4 * n)
    # mostly ordinary magnitudes, with specials sprinkled in
    vals = []
    for _ in range(n):
        u = r.random()
        if u < 0.05:
            vals.append(r.choice((0.0, -0.0, float("inf"), float("-inf"), float("nan"), 1e-45, 3.4e38)))
        else:
            vals.append(r.uniform(-1, 1) * 10 ** r.randint(-30, 30))
    return b"".join(oracles.f32_bits(oracles.f32(v)).to_bytes(4, "big") for v in vals)


def test_c2_simd_matches_scalar_oracle():
    with criterion(2, "ISA oracle equivalence: 1e3 cases per SIMD opcode x dtype") as line:
        t0 = time.perf_counter()
        dev = Device(1 << 17)
        r = random.Random(2)
        combos = 0
        for name, op in _SIMD.items():
            dtypes = ("byte", "int32", "float32") if name == "xor" else ("int32", "float32")
            for dt in dtypes:
                combos += 1
                for _ in range(1000):
                    n = r.randint(1, 64)
                    mem, operand = _operand(r, n, dt), _operand(r, n, dt)
                    dev.store(0x10000, mem)
                    pkt = NetdamPacket(opcode=op, address=0x10000, length=4 * n, payload=operand, dtype=_DTYPES[dt])
                    [(_, ack)] = dev.execute(pkt, ("10.0.0.1", 1))
                    assert ack.status == isa.Status.OK
                    got = dev.mem(0x10000, 4 * n)
                    want = oracles.scalar_simd(name, dt, mem, operand)
                    if dt == "float32" and name in ("add", "sub", "mul"):
                        assert oracles.same_f32_bits(got, want), (name, dt, mem.hex(), operand.hex())
                    else:
                        assert got == want, (name, dt, mem.hex(), operand.hex())
        elapsed = time.perf_counter() - t0
        assert elapsed < 60
        line.detail = f"{combos} opcode/dtype pairs"


# --- 3: interleave bijection --------------------------------------------------


def test_c3_interleave_bijection():
    with criterion(3, "interleave bijection (8,3,96) and (8192,4,2^20); 1e4 inverse round trips"):
        small = PoolLayout(tuple(("10.0.0.1", p) for p in range(3)), span=32, block_size=8)
        table = [small.map_global(g) for g in range(96)]
        assert table == oracles.interleave_table(8, 3, 96)
        assert len(set(table)) == 96

        big = PoolLayout(tuple(("10.0.0.1", p) for p in range(4)), span=1 << 18, block_size=8192)
        seen = set()
        for g in range(1 << 20):
            d, l = big.map_global(g)
            assert 0 <= d < 4 and 0 <= l < 1 << 18
            seen.add(d << 20 | l)
        assert len(seen) == 1 << 20
        # cross-check a slice against the dealing oracle
        ref = oracles.interleave_table(8192, 4, 1 << 20)
        for g in range(0, 1 << 20, 4099):
            assert big.map_global(g) == ref[g]
        r = random.Random(3)
        for _ in range(10_000):
            g = r.randrange(1 << 20)
            assert big.inverse_map(*big.map_global(g)) == g
            d, l = r.randrange(4), r.randrange(1 << 18)
            assert big.map_global(big.inverse_map(d, l)) == (d, l)


# --- 4: pool end to end -------------------------------------------------------


def test_c4_pool_round_trip():
    with criterion(4, "1 MiB pool write/read-back over 4 sim devices") as line:
        c = Cluster(4, 0x10000 + (1 << 18), SimNetConfig(seed=4))
        lay = c.layout(1 << 18)
        data = random.Random(4).randbytes(1 << 20)
        c.client.pool_write(lay, 0, data)
        assert c.client.pool_read(lay, 0, 1 << 20) == data
        for k, dev in enumerate(c.devices):
            # block k*8192 of the global range is the first block on device k
            assert dev.mem(0x10000, 8192) == data[k * 8192 : (k + 1) * 8192]
        line.detail = f"packets={c.net.counters['deliver']}"


# --- 5: allreduce -----------------------------------------------------------------


def test_c5_allreduce_exact():
    with criterion(5, "allreduce 4 devices, 2^20 float32, chunk 2048, exact vs ring oracle, < 30 s") as line:
        n, length = 4, 1 << 20
        c = Cluster(n, vector_mem(length))
        plan = collective.plan_ring(c.nodes, length, 2048)
        vectors = collective.seeded_vectors(n, length, 5)
        for i, v in enumerate(vectors):
            collective.load_vector(plan, c.requester, i, v)
        t0 = time.perf_counter()
        res = collective.allreduce(plan, c.requester)
        wall = time.perf_counter() - t0
        assert res.ok
        expected = oracles.ring_sum(vectors, 2048).astype(">f4").tobytes()
        for dev in c.devices:
            assert dev.mem(plan.base_address, 4 * length) == expected
        assert wall < 30, f"allreduce took {wall:.1f}s"
        line.detail = f"allreduce wall={wall:.2f}s"


# --- 6: idempotency guard ------------------------------------------------------


class ReplayNetwork(SimNetwork):
    """Sends every reduce-scatter request datagram ``k`` times."""

    def __init__(self, k: int, **kw) -> None:
        super().__init__(**kw)
        self.k = k
        self.replayed = 0

    def send(self, src, dst, data) -> None:
        p = decode_packet(data)
        copies = self.k if p.opcode == isa.REDUCE_SCATTER_STEP and not p.is_ack else 1
        self.replayed += copies - 1
        for _ in range(copies):
            super().send(src, dst, data)


def _guarded_run(k: int, vectors, length: int):
    c = Cluster(4, vector_mem(length), net=ReplayNetwork(k, config=SimNetConfig(seed=6)))
    plan = collective.plan_ring(c.nodes, length, 2048)
    for i, v in enumerate(vectors):
        collective.load_vector(plan, c.requester, i, v)
    shadows = [bytes(d.memory) for d in c.devices]
    rs = collective.run_reduce_scatter(plan, c.requester)
    interim_changes = 0
    for node, dev in enumerate(c.devices):
        for ch in plan.chunks:
            if ch.owner != node:
                span = slice(ch.address, ch.address + ch.nbytes)
                interim_changes += dev.memory[span] != shadows[node][span]
    collective.run_allgather(plan, c.requester)
    return c, rs, interim_changes


def test_c6_replay_is_idempotent():
    with criterion(6, "reduce-scatter replay k in {2,5}: identical memory, zero interim mutation") as line:
        length = 1 << 16
        vectors = collective.seeded_vectors(4, length, 6)
        base, rs1, changes = _guarded_run(1, vectors, length)
        assert changes == 0
        notes = []
        for k in (2, 5):
            run, rs, changes = _guarded_run(k, vectors, length)
            assert run.net.replayed > 0
            assert changes == 0
            for a, b in zip(base.devices, run.devices):
                assert bytes(a.memory) == bytes(b.memory)
            notes.append(f"k={k}: replayed={run.net.replayed} guarded={rs.guarded_duplicates}")
        line.detail = "; ".join(notes)


# --- 7: loss resilience ---------------------------------------------------------


def _lossy_allreduce(length: int):
    sim = SimNetConfig(loss=0.3, duplicate=0.3, reorder=0.3, seed=7)
    c = Cluster(4, vector_mem(length), sim, trace=True, max_attempts=64)
    plan = collective.plan_ring(c.nodes, length, 2048)
    vectors = collective.seeded_vectors(4, length, 7)
    for i, v in enumerate(vectors):
        collective.load_vector(plan, c.requester, i, v)
    res = collective.allreduce(plan, c.requester)
    return c, plan, vectors, res


def test_c7_loss_resilience_and_determinism():
    with criterion(7, "allreduce under loss=dup=reorder=0.3, 2^16 floats, deterministic") as line:
        length = 1 << 16
        first, plan, vectors, res1 = _lossy_allreduce(length)
        second, _, _, res2 = _lossy_allreduce(length)
        assert res1.ok and res2.ok
        expected = oracles.ring_sum(vectors, 2048).astype(">f4").tobytes()
        for dev in first.devices:
            assert dev.mem(plan.base_address, 4 * length) == expected
        assert first.net.trace_lines() == second.net.trace_lines()
        assert [bytes(d.memory) for d in first.devices] == [bytes(d.memory) for d in second.devices]
        assert res1.to_dict() == res2.to_dict()
        line.detail = f"retries={res1.total_retries} drops={first.net.counters['drop']}"


# --- 8: incast bound ------------------------------------------------------------


def test_c8_incast_token_bucket():
    with criterion(8, "8 pullers, 4 devices, rate=200/s burst=16: zero bucket violations") as line:
        rate, burst = 200, 16
        c = Cluster(4, 0x10000 + 16 * 8192)
        lay = c.layout(16 * 8192)
        data = random.Random(8).randbytes(lay.total_size)
        c.client.pool_write(lay, 0, data)
        pullers = []
        for k in range(8):
            p = Puller(c.net.carrier((f"10.0.1.{k + 1}", 9000)), lay, PullScheduler(rate=rate, burst=burst))
            p.start(0, lay.total_size)
            pullers.append(p)
        drive(pullers)
        issued = 0
        for p in pullers:
            assert p.result() == data
            times = p.scheduler.issue_times()
            issued += len(times)
            assert bucket_violations(times, rate, burst) == []
            assert oracles.bucket_replay_ok(times, rate, burst)
            assert max(p.scheduler.max_outstanding_per_device.values()) <= burst
        line.detail = f"issued={issued} virtual_time={c.net.now:.2f}s"


# --- 9: ACL default deny ----------------------------------------------------------


def _random_request(r: random.Random, ops: list[int]):
    ip = f"10.1.{r.randrange(4)}.{r.randrange(256)}" if r.random() < 0.5 else f"192.168.{r.randrange(256)}.{r.randrange(256)}"
    op = r.choice(ops)
    addr = r.choice((r.randrange(0x10000, 0x30000), r.randrange(0, 0x80000)))
    length = r.choice((4, 8, 64, r.randrange(4, 0x2000, 4)))
    payload = b""
    if op in (isa.WRITE, *isa.SIMD_OPS):
        payload = bytes(length)
    elif op == isa.CAS:
        length, payload = 8, bytes(16)
    elif op == isa.MEMCOPY:
        payload = (0x40000).to_bytes(8, "big")
    pkt = NetdamPacket(opcode=op, address=addr, length=length, payload=payload, dtype=DType.INT32)
    return (ip, 5000), pkt


def test_c9_acl_default_deny():
    with criterion(9, "empty ACL denies 100%; a permit rule flips exactly the matching subset") as line:
        r = random.Random(9)
        ops = [isa.READ, isa.WRITE, isa.CAS, isa.MEMCOPY, isa.BLOCK_HASH, *isa.SIMD_OPS]
        requests = [_random_request(r, ops) for _ in range(3000)]

        closed = Device(1 << 19, acl=AclTable([], enforce=True))
        statuses = [closed.handle_datagram(encode_packet(p), src) for src, p in requests]
        assert all(decode_packet(out[0][1]).status == isa.Status.ACL_DENIED for out in statuses)

        rule = "10.1.0.0/16 10000..30000 READ,WRITE,SIMD_ADD"
        net, lo, hi, allowed = ipaddress.ip_network("10.1.0.0/16"), 0x10000, 0x30000, {isa.READ, isa.WRITE, isa.SIMD_ADD}
        opened = Device(1 << 19, acl=parse_acl(rule))
        matched = 0
        for src, p in requests:
            [(_, ack)] = opened.execute(p, src)
            matches = ipaddress.ip_address(src[0]) in net and p.opcode in allowed and lo <= p.address and p.address + p.length <= hi
            matched += matches
            assert (ack.status == isa.Status.ACL_DENIED) == (not matches)
        assert 0 < matched < len(requests)
        line.detail = f"permitted={matched}/{len(requests)}"


if __name__ == "__main__":
    import sys

    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_c") and callable(fn):
            try:
                fn()
            except BaseException:
                failed += 1
    print("\n".join(RESULTS))
    sys.exit(1 if failed else 0)
