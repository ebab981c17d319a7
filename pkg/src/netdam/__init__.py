"""Network-attached memory devices: wire codec, instruction set, pooled memory and ring collectives over UDP."""

from .addressing import AclTable, AllocationMap, PoolLayout, parse_acl
from .client import NetdamClient, StatusError
from .collective import allreduce, plan_ring, run_allgather, run_reduce_scatter
from .device import Device
from .isa import Status
from .transport import Requester, SimNetConfig, SimNetwork, UdpCarrier
from .wire import DType, Flag, NetdamPacket, Segment, SegmentStack, decode_packet, encode_packet

__version__ = "0.1.0"

__all__ = [
    "AclTable", "AllocationMap", "DType", "Device", "Flag", "NetdamClient", "NetdamPacket", "PoolLayout",
    "Requester", "Segment", "SegmentStack", "SimNetConfig", "SimNetwork", "Status", "StatusError", "UdpCarrier",
    "allreduce", "decode_packet", "encode_packet", "parse_acl", "plan_ring", "run_allgather", "run_reduce_scatter",
]
