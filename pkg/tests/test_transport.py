from __future__ import annotations

import pytest

import oracles
from harness import Cluster
from netdam import isa, transport
from netdam.device import Device
from netdam.transport import (
    CapacityExceeded,
    EncodeError,
    Exhausted,
    Puller,
    PullScheduler,
    ReorderBuffer,
    RetransmitState,
    SimNetConfig,
    SimNetwork,
    TokenBucket,
    UdpCarrier,
    bucket_violations,
    drive,
    pull_read,
    reliable_request,
    reorder_deliver,
)
from netdam.wire import Flag, NetdamPacket

A, B = ("10.0.0.1", 1), ("10.0.0.2", 2)
BASE = 0x10000


def ping(seq):
    return NetdamPacket(opcode=isa.READ, sequence=seq)


def test_sim_lossless_delivers_each_packet_once():
    net = SimNetwork(SimNetConfig(seed=1))
    a, b = net.carrier(A), net.carrier(B)
    for i in range(50):
        transport.send(a, B, ping(i))
    got = []
    while (r := transport.recv(b, 0.01)) is not None:
        got.append(r[1].sequence)
    assert sorted(got) == list(range(50))
    assert net.counters["deliver"] == 50


def test_sim_total_loss():
    net = SimNetwork(SimNetConfig(loss=1.0))
    a, b = net.carrier(A), net.carrier(B)
    for i in range(20):
        a.send(B, ping(i))
    assert b.recv(1.0) is None
    assert net.counters["drop"] == 20


def test_sim_rejects_oversize_and_bad_config():
    net = SimNetwork()
    a = net.carrier(A)
    with pytest.raises(EncodeError):
        a.send_bytes(B, bytes(9001))
    with pytest.raises(EncodeError):
        a.send(B, NetdamPacket(opcode=1, flags=0x40))
    with pytest.raises(ValueError):
        SimNetConfig(loss=1.5)
    with pytest.raises(ValueError):
        net.carrier(A)


def _lossy_writes(seed):
    c = Cluster(2, 1 << 18, SimNetConfig(loss=0.3, duplicate=0.3, reorder=0.3, seed=seed), trace=True, max_attempts=32)
    for i in range(40):
        c.client.write(c.nodes[i % 2], BASE + 16 * i, bytes([i]) * 16)
    return c


def test_sim_trace_is_reproducible(tmp_path):
    first, second = _lossy_writes(5), _lossy_writes(5)
    assert first.net.trace_lines() == second.net.trace_lines()
    first.net.dump_trace(tmp_path / "a.jsonl")
    second.net.dump_trace(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert _lossy_writes(6).net.trace_lines() != first.net.trace_lines()


def test_lossy_write_reads_back():
    c = _lossy_writes(11)
    assert c.requester.rt.retransmits > 0
    for i in range(40):
        assert c.client.read(c.nodes[i % 2], BASE + 16 * i, 16).payload == bytes([i]) * 16


def test_duplicated_idempotent_writes_equal_single_application():
    clean = Cluster(1, 1 << 18)
    noisy = Cluster(1, 1 << 18, SimNetConfig(duplicate=0.5, seed=3))
    for c in (clean, noisy):
        for i in range(100):
            c.client.write(c.nodes[0], BASE + (i * 7) % 512, bytes([i, i + 1]))
            c.client.cas(c.nodes[0], BASE + 1024, i, i + 1)
    assert noisy.net.counters["dup"] > 0
    assert clean.devices[0].memory == noisy.devices[0].memory


def test_exhausted_after_max_attempts():
    net = SimNetwork(SimNetConfig(loss=1.0))
    carrier = net.carrier(A)
    rt = RetransmitState(timeout=0.05, max_attempts=5)
    with pytest.raises(Exhausted) as info:
        reliable_request(rt, carrier, B, NetdamPacket(opcode=isa.READ, length=4))
    assert info.value.request.attempts == 5
    assert net.now == pytest.approx(5 * 0.05)
    assert rt.pending == {} and rt.exhausted == 1


def test_reliable_request_refuses_unsafe_opcodes():
    net = SimNetwork()
    net.attach_device(B, Device(1 << 17))
    carrier = net.carrier(A)
    add = NetdamPacket(opcode=isa.SIMD_ADD, address=BASE, length=4, payload=bytes(4), dtype=2)
    with pytest.raises(ValueError):
        reliable_request(RetransmitState(), carrier, B, add)
    unguarded = NetdamPacket(opcode=isa.REDUCE_SCATTER_STEP, address=BASE, length=4, payload=bytes(4), dtype=2)
    with pytest.raises(ValueError):
        reliable_request(RetransmitState(), carrier, B, unguarded)
    ack = reliable_request(RetransmitState(), carrier, B, add, override=True)
    assert ack.status == isa.Status.OK and ack.has(Flag.RELIABLE)


def test_requester_window_and_stray_acks():
    c = Cluster(1, 1 << 18, window=4)
    reqs = [c.requester.submit(c.nodes[0], NetdamPacket(opcode=isa.READ, address=BASE, length=4)) for _ in range(10)]
    assert len(c.requester.rt.pending) == 4 and len(c.requester.backlog) == 6
    drive([c.requester])
    assert all(r.ok for r in reqs)
    c.requester.on_datagram(c.nodes[0], transport._encode(NetdamPacket(opcode=1, sequence=999, flags=Flag.ACK)))
    assert c.requester.stray_acks == 1


@pytest.mark.parametrize(
    "arrivals, releases",
    [
        ([2, 1], [[], [1, 2]]),
        ([1, 3, 2], [[1], [], [2, 3]]),
        ([1, 1], [[1], []]),
    ],
)
def test_reorder_buffer(arrivals, releases):
    rb = ReorderBuffer()
    got = [[p.sequence for p in reorder_deliver(rb, ping(s))] for s in arrivals]
    assert got == releases
    if arrivals == [1, 1]:
        assert rb.duplicates == 1


def test_reorder_buffer_eviction():
    rb = ReorderBuffer(capacity=2)
    rb.deliver(ping(3))
    rb.deliver(ping(4))
    with pytest.raises(CapacityExceeded):
        rb.deliver(ping(5))
    assert rb.evictions == 1 and rb.holdback == {}


def test_token_bucket():
    tb = TokenBucket(rate=10, burst=2, now=0.0)
    assert tb.try_take(0.0) and tb.try_take(0.0) and not tb.try_take(0.0)
    assert tb.next_available(0.0) == pytest.approx(0.1)
    assert tb.try_take(0.1)
    assert bucket_violations([0, 0, 0.1], 10, 2) == []
    assert bucket_violations([0, 0, 0.05], 10, 2) == [(0, 2)]


def _pool(n_dev=4, blocks_per_dev=16, sim=None):
    c = Cluster(n_dev, 0x10000 + blocks_per_dev * 8192, sim)
    lay = c.layout(blocks_per_dev * 8192)
    data = bytes((i * 31 + 7) % 251 for i in range(lay.total_size))
    c.client.pool_write(lay, 0, data)
    return c, lay, data


def test_pull_read_is_rate_limited():
    c, lay, data = _pool()
    ps = PullScheduler(rate=100, burst=5)
    carrier = c.net.carrier(("10.0.0.200", 1))
    t0 = c.net.now
    got = pull_read(ps, lay, 0, 50 * 8192, carrier)
    assert got == data[: 50 * 8192]
    assert c.net.now - t0 >= (50 - 5) / 100
    assert bucket_violations(ps.issue_times(), 100, 5) == []
    assert oracles.bucket_replay_ok(ps.issue_times(), 100, 5)


def test_pull_read_survives_loss_and_reverse_replies():
    c, lay, data = _pool(sim=SimNetConfig(loss=0.2, reorder=0.5, reorder_ms=50, seed=4))
    ps = PullScheduler(rate=500, burst=8)
    puller = Puller(c.net.carrier(("10.0.0.200", 1)), lay, ps, max_attempts=32)
    puller.start(1000, lay.total_size - 2000)
    drive([puller])
    assert puller.result() == data[1000:-1000]
    assert puller.rt.retransmits > 0
    assert oracles.bucket_replay_ok(ps.issue_times(), 500, 8)


def test_concurrent_pullers_bound_outstanding_per_device():
    c, lay, data = _pool()
    pullers = []
    for k in range(8):
        ps = PullScheduler(rate=200, burst=16)
        p = Puller(c.net.carrier((f"10.0.1.{k + 1}", 1)), lay, ps)
        p.start(0, lay.total_size)
        pullers.append(p)
    drive(pullers)
    for p in pullers:
        assert p.result() == data
        assert max(p.scheduler.max_outstanding_per_device.values()) <= 16


def test_pull_read_exhausted_on_dead_device():
    c, lay, _ = _pool(n_dev=2, blocks_per_dev=2)
    c.net.config = SimNetConfig(loss=1.0)
    with pytest.raises(Exhausted):
        pull_read(PullScheduler(rate=1000, burst=4), lay, 0, 8192, c.net.carrier(("10.0.0.200", 1)), max_attempts=2)


def test_udp_carrier_round_trip():
    with UdpCarrier() as a, UdpCarrier() as b:
        a.send(b.local, ping(7))
        src, pkt = b.recv(1.0)
        assert src == a.local and pkt.sequence == 7
        b.send_bytes(a.local, b"junk")
        assert a.recv(0.05) is None
        assert a.decode_errors == 1


def test_mixed_networks_cannot_share_a_drive():
    r1 = Cluster(1, 1 << 17).requester
    r2 = Cluster(1, 1 << 17).requester
    with pytest.raises(transport.TransportError):
        drive([r1, r2])
