"""Small builders for in-process clusters on the simulated network."""

from __future__ import annotations

from netdam.addressing import QUEUE_WINDOW, PoolLayout
from netdam.client import NetdamClient
from netdam.device import Device
from netdam.transport import Requester, SimNetConfig, SimNetwork

CONTROLLER = ("10.0.0.254", 9000)


def node(i: int) -> tuple[str, int]:
    return (f"10.0.0.{i + 1}", 7000)


class Cluster:
    def __init__(self, n: int, mem_size: int, sim: SimNetConfig | None = None, *, net: SimNetwork | None = None, trace: bool = False, **req_kw) -> None:
        self.net = net or SimNetwork(sim or SimNetConfig(), trace=trace)
        self.nodes = [node(i) for i in range(n)]
        self.devices = []
        for ep in self.nodes:
            dev = Device(mem_size, name=f"{ep[0]}:{ep[1]}")
            self.net.attach_device(ep, dev)
            self.devices.append(dev)
        self.requester = Requester(self.net.carrier(CONTROLLER), **req_kw)
        self.client = NetdamClient(self.requester)

    def layout(self, span: int, block_size: int = 8192) -> PoolLayout:
        return PoolLayout(tuple(self.nodes), span=span, block_size=block_size)


def vector_mem(length: int) -> int:
    return QUEUE_WINDOW + 4 * length + 8192
