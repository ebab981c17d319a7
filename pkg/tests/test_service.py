from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from netdam.service import Controller, create_app
from netdam.transport import SimNetConfig


@pytest.fixture
def ctl() -> Controller:
    return Controller.in_process(4, span=1 << 18)


@pytest.fixture
def api(ctl) -> TestClient:
    return TestClient(create_app(ctl))


def test_health_and_pool(api):
    assert api.get("/health").json() == {"status": "ok", "devices": 4}
    pool = api.get("/pool").json()
    assert pool["total_size"] == 1 << 20 and pool["block_size"] == 8192
    assert pool["devices"][0] == "10.0.0.1:7000"
    assert pool["free"] == [[0, 1 << 20]]


def test_region_write_read_spans_devices(api, ctl):
    r = api.post("/pool/alloc", json={"size": 40000, "owner": "t"}).json()
    assert r["size"] == 40960
    data = bytes(range(256)) * 100
    assert api.post(f"/pool/{r['id']}/write", json={"offset": 1000, "data_hex": data.hex()}).json() == {"written": 25600}
    got = api.post(f"/pool/{r['id']}/read", json={"offset": 1000, "length": 25600}).json()
    assert bytes.fromhex(got["data_hex"]) == data
    # the bytes really are striped: the second block lives on device 1
    assert ctl.devices[1].mem(0x10000, 16) == data[8192 - 1000 : 8192 - 1000 + 16]


def test_error_mapping(api):
    r = api.post("/pool/alloc", json={"size": 8192}).json()
    assert api.post(f"/pool/{r['id']}/read", json={"offset": 8000, "length": 500}).status_code == 400
    assert api.post("/pool/77/read", json={"offset": 0, "length": 4}).status_code == 404
    assert api.post("/pool/alloc", json={"size": 1 << 30}).status_code == 507
    assert api.post("/pool/alloc", json={"size": 0}).status_code == 422
    api.post("/pool/free", json={"id": r["id"]})
    resp = api.post("/pool/free", json={"id": r["id"]})
    assert resp.status_code == 409 and resp.json()["error"] == "DOUBLE_FREE"
    assert api.post(f"/pool/{r['id']}/write", json={"data_hex": "zz"}).status_code == 400


def test_instruction_endpoint(api):
    ok = api.post(
        "/instructions",
        json={"endpoint": "10.0.0.2:7000", "opcode": "WRITE", "address": 0x10000, "payload_hex": "cafe"},
    ).json()
    assert ok["status"] == "OK" and ok["status_code"] == 0
    got = api.post("/instructions", json={"endpoint": "10.0.0.2:7000", "opcode": 1, "address": 0x10000, "length": 2}).json()
    assert got["payload_hex"] == "cafe"
    oob = api.post("/instructions", json={"endpoint": "10.0.0.2:7000", "opcode": "READ", "address": 1 << 40, "length": 2}).json()
    assert oob["status"] == "OUT_OF_BOUNDS"
    simd = api.post(
        "/instructions",
        json={
            "endpoint": "10.0.0.1:7000", "opcode": "add", "address": 0x10000, "dtype": "float32",
            "payload_hex": "3f800000", "target_packet": True,
        },
    ).json()
    assert simd["payload_hex"] == "3f800000"
    assert api.post("/instructions", json={"endpoint": "nohost", "opcode": 1}).status_code == 400


def test_allreduce_endpoint_frees_its_region(api):
    out = api.post("/allreduce", json={"vector_length": 20000, "chunk_elems": 1024, "seed": 5}).json()
    assert out["verdict"] == "PASS"
    assert out["report"]["reduce_scatter"]["chunks"] == 20
    assert api.get("/pool").json()["regions"] == []


def test_unreachable_device_is_504():
    ctl = Controller.in_process(2, span=1 << 16, sim=SimNetConfig(loss=1.0), max_attempts=2)
    api = TestClient(create_app(ctl))
    r = api.post("/pool/alloc", json={"size": 10}).json()
    resp = api.post(f"/pool/{r['id']}/read", json={"length": 4})
    assert resp.status_code == 504 and resp.json()["error"] == "EXHAUSTED"
