"""Pool controller: allocation, ACL-style bookkeeping and collectives behind an HTTP API.

The controller plays the SDN-controller role: it owns the pool layout and the
allocation map and talks to the devices over their UDP wire protocol.
"""

from __future__ import annotations

import threading
import time

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from . import collective, isa
from .addressing import (
    AllocationMap,
    DoubleFree,
    OutOfMemoryPool,
    OutOfPool,
    PoolLayout,
    Region,
    UnknownRegion,
)
from .client import NetdamClient, StatusError
from .config import format_endpoint, parse_dtype, parse_endpoint, parse_opcode
from .device import Device
from .schemas import (
    AckOut,
    AllocRequest,
    AllreduceOut,
    AllreduceRequest,
    FreeRequest,
    InstructionRequest,
    PoolOut,
    ReadRequest,
    ReadResponse,
    RegionOut,
    WriteRequest,
)
from .transport import Exhausted, Requester, SimNetConfig, SimNetwork, UdpCarrier
from .wire import CodecError, Flag, NetdamPacket


class Controller:
    """Serializes every pool and device operation behind one lock."""

    def __init__(self, layout: PoolLayout, client: NetdamClient, *, network: SimNetwork | None = None) -> None:
        self.layout = layout
        self.client = client
        self.network = network
        self.amap = AllocationMap.for_layout(layout)
        self.lock = threading.Lock()
        self.devices: list[Device] = []

    @classmethod
    def udp(cls, layout: PoolLayout, local=("127.0.0.1", 0), **kw) -> Controller:
        return cls(layout, NetdamClient(Requester(UdpCarrier(local), **kw)))

    @classmethod
    def in_process(
        cls,
        n_devices: int = 4,
        *,
        span: int = 1 << 20,
        block_size: int = 8192,
        sim: SimNetConfig | None = None,
        max_attempts: int = 16,
    ) -> Controller:
        net = SimNetwork(sim or SimNetConfig(), trace=False)
        endpoints = [(f"10.0.0.{i + 1}", 7000) for i in range(n_devices)]
        layout = PoolLayout(tuple(endpoints), span=span, block_size=block_size)
        devices = []
        for ep in endpoints:
            dev = Device(layout.device_mem_required(), name=format_endpoint(ep))
            net.attach_device(ep, dev)
            devices.append(dev)
        client = NetdamClient(Requester(net.carrier(("10.0.0.254", 9000)), max_attempts=max_attempts))
        ctl = cls(layout, client, network=net)
        ctl.devices = devices
        return ctl

    # -- pool

    def region_out(self, r: Region) -> RegionOut:
        return RegionOut(id=r.id, offset=r.offset, size=r.size, owner=r.owner)

    def pool(self) -> PoolOut:
        with self.lock:
            return PoolOut(
                devices=[format_endpoint(d) for d in self.layout.devices],
                block_size=self.layout.block_size,
                span=self.layout.span,
                total_size=self.layout.total_size,
                regions=[self.region_out(r) for r in self.amap.regions.values()],
                free=list(self.amap.free_list),
            )

    def alloc(self, size: int, owner: str = "", align: int | None = None) -> Region:
        with self.lock:
            return self.amap.get(self.amap.alloc(size, owner, align))

    def free(self, rid: int) -> None:
        with self.lock:
            self.amap.free(rid)

    def _span(self, rid: int, offset: int, length: int) -> int:
        region = self.amap.get(rid)
        if offset + length > region.size:
            raise OutOfPool(f"[{offset}, {offset + length}) exceeds region {rid} of {region.size} bytes")
        return region.offset + offset

    def write(self, rid: int, offset: int, data: bytes) -> None:
        with self.lock:
            g = self._span(rid, offset, len(data))
            self.client.pool_write(self.layout, g, data)

    def read(self, rid: int, offset: int, length: int) -> bytes:
        with self.lock:
            g = self._span(rid, offset, length)
            return self.client.pool_read(self.layout, g, length)

    # -- single instructions

    def instruction(self, endpoint, packet: NetdamPacket, reliable: bool = True) -> tuple[NetdamPacket, float]:
        with self.lock:
            req = self.client.requester
            t0 = req.carrier.now()
            ack = self.client.call(endpoint, packet, reliable=reliable)
            return ack, (req.carrier.now() - t0) * 1e6

    # -- collectives

    def allreduce(self, vector_length: int, chunk_elems: int = 2048, seed: int = 0) -> dict:
        """Allreduce seeded vectors inside a freshly allocated, device-aligned pool region."""
        n, B = self.layout.n, self.layout.block_size
        per_device = -(-4 * vector_length // B) * B
        region = self.alloc(per_device * n, owner="allreduce", align=n * B)
        try:
            with self.lock:
                _, local = self.layout.map_global(region.offset)
                plan = collective.plan_ring(
                    self.layout.devices, vector_length, chunk_elems,
                    base_address=self.layout.device_address(local),
                )
                req = self.client.requester
                vectors = collective.seeded_vectors(n, vector_length, seed)
                for i, v in enumerate(vectors):
                    collective.load_vector(plan, req, i, v)
                t0 = time.perf_counter()
                result = collective.allreduce(plan, req, raise_on_failure=False)
                wall = time.perf_counter() - t0
                verdict = "FAIL"
                detail = ""
                if result.ok:
                    try:
                        collective.verify(plan, req, vectors)
                        verdict = "PASS"
                    except collective.VerificationFailed as exc:
                        detail = str(exc)
                report = result.to_dict()
                report.update(wall_s=wall, nodes=n, vector_length=vector_length, chunk_elems=chunk_elems, seed=seed)
                if detail:
                    report["detail"] = detail
                return {"verdict": verdict, "report": report}
        finally:
            self.free(region.id)


_ERRORS = {
    UnknownRegion: (404, "UNKNOWN_REGION"),
    DoubleFree: (409, "DOUBLE_FREE"),
    OutOfMemoryPool: (507, "OUT_OF_MEMORY_POOL"),
    OutOfPool: (400, "OUT_OF_POOL"),
    Exhausted: (504, "EXHAUSTED"),
    CodecError: (400, "BAD_PACKET"),
    collective.BadParams: (400, "BAD_PARAMS"),
}


def create_app(controller: Controller) -> FastAPI:
    app = FastAPI(title="netdam controller")
    app.state.controller = controller

    for exc_type, (code, name) in _ERRORS.items():

        def handler(request: Request, exc: Exception, code=code, name=name) -> JSONResponse:
            return JSONResponse(status_code=code, content={"error": name, "detail": str(exc)})

        app.add_exception_handler(exc_type, handler)

    @app.exception_handler(StatusError)
    def status_error(request: Request, exc: StatusError) -> JSONResponse:
        return JSONResponse(status_code=502, content={"error": exc.status.name, "detail": str(exc)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "devices": len(controller.layout.devices)}

    @app.get("/pool", response_model=PoolOut)
    def pool() -> PoolOut:
        return controller.pool()

    @app.post("/pool/alloc", response_model=RegionOut)
    def alloc(body: AllocRequest) -> RegionOut:
        return controller.region_out(controller.alloc(body.size, body.owner))

    @app.post("/pool/free")
    def free(body: FreeRequest) -> dict:
        controller.free(body.id)
        return {"freed": body.id}

    @app.post("/pool/{rid}/write")
    def write(rid: int, body: WriteRequest) -> dict:
        data = _unhex(body.data_hex)
        controller.write(rid, body.offset, data)
        return {"written": len(data)}

    @app.post("/pool/{rid}/read", response_model=ReadResponse)
    def read(rid: int, body: ReadRequest) -> ReadResponse:
        return ReadResponse(data_hex=controller.read(rid, body.offset, body.length).hex())

    @app.post("/instructions", response_model=AckOut)
    def instruction(body: InstructionRequest) -> AckOut:
        try:
            endpoint = parse_endpoint(body.endpoint)
            opcode = parse_opcode(body.opcode)
            dtype = parse_dtype(body.dtype)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        payload = _unhex(body.payload_hex)
        length = body.length if body.length is not None else len(payload)
        pkt = NetdamPacket(
            opcode=opcode, address=body.address, length=length, payload=payload, dtype=dtype,
            flags=Flag.TARGET_PACKET if body.target_packet else 0,
        )
        ack, latency = controller.instruction(endpoint, pkt, reliable=body.reliable)
        return AckOut(
            status=isa.Status(ack.status).name,
            status_code=ack.status,
            sequence=ack.sequence,
            opcode=ack.opcode,
            payload_hex=ack.payload.hex(),
            latency_us=latency,
        )

    @app.post("/allreduce", response_model=AllreduceOut)
    def allreduce(body: AllreduceRequest) -> AllreduceOut:
        return AllreduceOut(**controller.allreduce(body.vector_length, body.chunk_elems, body.seed))

    return app


def _unhex(text: str) -> bytes:
    try:
        return bytes.fromhex(text)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=f"bad hex: {exc}") from exc
