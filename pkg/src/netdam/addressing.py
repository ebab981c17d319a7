"""Global memory pool: block interleaving, allocation, and access control."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import isa
from .wire import MAX_PAYLOAD, Endpoint, NetdamPacket

QUEUE_WINDOW = 64 * 1024
DEFAULT_BLOCK_SIZE = 8192


class PoolError(Exception):
    pass


class OutOfPool(PoolError):
    pass


class OutOfMemoryPool(PoolError):
    pass


class UnknownRegion(PoolError):
    pass


class DoubleFree(PoolError):
    pass


class AclParseError(ValueError):
    def __init__(self, lineno: int, msg: str) -> None:
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class PoolLayout:
    """Round-robin block interleave of a global space over ``devices``.

    ``span`` is the pool bytes each device contributes; pool-local address
    ``l`` lives at device address ``local_base + l``, above the queue window.
    """

    devices: tuple[Endpoint, ...]
    span: int
    block_size: int = DEFAULT_BLOCK_SIZE
    local_base: int = QUEUE_WINDOW

    def __post_init__(self) -> None:
        object.__setattr__(self, "devices", tuple(tuple(d) for d in self.devices))
        if not self.devices:
            raise ValueError("pool needs at least one device")
        if self.block_size <= 0 or self.block_size % 4:
            raise ValueError("block_size must be a positive multiple of 4")
        if self.span <= 0 or self.span % self.block_size:
            raise ValueError("span must be a positive multiple of block_size")

    @property
    def n(self) -> int:
        return len(self.devices)

    @property
    def total_size(self) -> int:
        return self.n * self.span

    def map_global(self, g: int) -> tuple[int, int]:
        if not 0 <= g < self.total_size:
            raise OutOfPool(f"global address {g:#x} outside pool of {self.total_size:#x}")
        B, N = self.block_size, self.n
        return (g // B) % N, (g // (B * N)) * B + g % B

    def inverse_map(self, device: int, local: int) -> int:
        if not 0 <= device < self.n or not 0 <= local < self.span:
            raise OutOfPool(f"({device}, {local:#x}) outside pool")
        B, N = self.block_size, self.n
        return ((local // B) * N + device) * B + local % B

    def device_address(self, local: int) -> int:
        return self.local_base + local

    def device_mem_required(self) -> int:
        return self.local_base + self.span


def map_global(layout: PoolLayout, g: int) -> tuple[int, int]:
    return layout.map_global(g)


def inverse_map(layout: PoolLayout, device: int, local: int) -> int:
    return layout.inverse_map(device, local)


# --- access control -------------------------------------------------------


@dataclass(frozen=True)
class AclRule:
    network: ipaddress.IPv4Network
    lo: int
    hi: int
    opcodes: frozenset[int]

    def matches(self, source_ip: str, opcode: int, addr: int, length: int) -> bool:
        try:
            ip = ipaddress.IPv4Address(source_ip)
        except ValueError:
            return False
        return (
            ip in self.network
            and opcode in self.opcodes
            and self.lo <= addr
            and addr + length <= self.hi
        )


@dataclass
class AclTable:
    rules: list[AclRule] = field(default_factory=list)
    enforce: bool = True

    def check(self, source_ip: str, opcode: int, addr: int, length: int) -> bool:
        if not self.enforce:
            return True
        return any(r.matches(source_ip, opcode, addr, length) for r in self.rules)

    @classmethod
    def permit_all(cls) -> AclTable:
        return cls(enforce=False)


def acl_check(table: AclTable, source_ip: str, opcode: int, addr: int, length: int) -> bool:
    return table.check(source_ip, opcode, addr, length)


def _parse_opcode(token: str) -> int:
    token = token.strip()
    if token.upper() in isa.OPCODES_BY_NAME:
        return isa.OPCODES_BY_NAME[token.upper()]
    return int(token, 0)


def parse_acl(text: str) -> AclTable:
    """Parse ``<cidr> <lo_hex>..<hi_hex> <op,op,...>`` lines; ``#`` starts a comment.

    Opcodes are names (``READ``) or integers (``0x0100``); ``*`` allows every opcode.
    """
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise AclParseError(lineno, f"expected 3 fields, got {len(parts)}")
        cidr, span, ops = parts
        try:
            network = ipaddress.IPv4Network(cidr, strict=False)
        except ValueError as exc:
            raise AclParseError(lineno, f"bad prefix {cidr!r}") from exc
        if ".." not in span:
            raise AclParseError(lineno, f"bad range {span!r}")
        lo_s, hi_s = span.split("..", 1)
        try:
            lo, hi = int(lo_s, 16), int(hi_s, 16)
        except ValueError as exc:
            raise AclParseError(lineno, f"bad range {span!r}") from exc
        if hi < lo:
            raise AclParseError(lineno, "range upper bound below lower bound")
        if ops == "*":
            opcodes = frozenset(range(0x10000))
        else:
            try:
                opcodes = frozenset(_parse_opcode(t) for t in ops.split(","))
            except ValueError as exc:
                raise AclParseError(lineno, f"bad opcode list {ops!r}") from exc
        rules.append(AclRule(network, lo, hi, opcodes))
    return AclTable(rules)


def load_acl(path: str | Path) -> AclTable:
    return parse_acl(Path(path).read_text())


# --- allocation -----------------------------------------------------------


@dataclass(frozen=True)
class Region:
    id: int
    offset: int
    size: int
    owner: str = ""


class AllocationMap:
    """First-fit allocator over a pool's global space, block granular.

    Not thread-safe; the controller serializes calls.
    """

    def __init__(self, total_size: int, block_size: int = DEFAULT_BLOCK_SIZE) -> None:
        self.total_size = total_size
        self.block_size = block_size
        self.free_list: list[tuple[int, int]] = [(0, total_size)] if total_size else []
        self.regions: dict[int, Region] = {}
        self._freed: set[int] = set()
        self._next_id = 1

    @classmethod
    def for_layout(cls, layout: PoolLayout) -> AllocationMap:
        return cls(layout.total_size, layout.block_size)

    def alloc(self, size: int, owner: str = "", align: int | None = None) -> int:
        """First fit. ``align`` (a block multiple) constrains the start offset.

        Aligning to ``n * block_size`` gives a region whose blocks sit at the
        same local offsets on every device.
        """
        if size <= 0:
            raise ValueError("allocation size must be positive")
        align = align or self.block_size
        if align % self.block_size:
            raise ValueError("align must be a multiple of block_size")
        size = -(-size // self.block_size) * self.block_size
        for i, (off, free) in enumerate(self.free_list):
            start = -(-off // align) * align
            if start + size > off + free:
                continue
            rest = [(off, start - off), (start + size, off + free - start - size)]
            self.free_list[i : i + 1] = [(o, s) for o, s in rest if s > 0]
            rid = self._next_id
            self._next_id += 1
            self.regions[rid] = Region(rid, start, size, owner)
            return rid
        raise OutOfMemoryPool(f"no free span of {size} bytes")

    def free(self, rid: int) -> None:
        if rid in self._freed:
            raise DoubleFree(f"region {rid} already freed")
        try:
            region = self.regions.pop(rid)
        except KeyError:
            raise UnknownRegion(f"region {rid}") from None
        self._freed.add(rid)
        self.free_list.append((region.offset, region.size))
        self.free_list.sort()
        merged: list[tuple[int, int]] = []
        for off, size in self.free_list:
            if merged and merged[-1][0] + merged[-1][1] == off:
                merged[-1] = (merged[-1][0], merged[-1][1] + size)
            else:
                merged.append((off, size))
        self.free_list = merged

    def get(self, rid: int) -> Region:
        try:
            return self.regions[rid]
        except KeyError:
            raise UnknownRegion(f"region {rid}") from None


def pool_alloc(amap: AllocationMap, size: int, owner: str = "") -> int:
    return amap.alloc(size, owner)


def pool_free(amap: AllocationMap, rid: int) -> None:
    amap.free(rid)


# --- interleaved access ---------------------------------------------------


@dataclass(frozen=True)
class PoolOp:
    """One per-device request produced by splitting a global range."""

    device: int
    global_offset: int
    packet: NetdamPacket


def split_range(layout: PoolLayout, g: int, length: int, max_piece: int = MAX_PAYLOAD) -> list[tuple[int, int, int, int]]:
    """Split ``[g, g+length)`` into ``(device, local, global, size)`` pieces.

    Pieces never cross a block boundary unless the next block continues the
    same device's local span, and never exceed ``max_piece`` bytes.
    """
    if length < 0 or g < 0 or g + length > layout.total_size:
        raise OutOfPool(f"range [{g:#x}, {g + length:#x}) outside pool")
    pieces: list[tuple[int, int, int, int]] = []
    pos, end = g, g + length
    B = layout.block_size
    while pos < end:
        size = min(end, (pos // B + 1) * B) - pos
        dev, local = layout.map_global(pos)
        if pieces:
            pdev, plocal, pg, psize = pieces[-1]
            if pdev == dev and plocal + psize == local and psize + size <= max_piece:
                pieces[-1] = (pdev, plocal, pg, psize + size)
                pos += size
                continue
        while size > max_piece:
            pieces.append((dev, local, pos, max_piece))
            local += max_piece
            pos += max_piece
            size -= max_piece
        pieces.append((dev, local, pos, size))
        pos += size
    return pieces


def interleaved_write(layout: PoolLayout, g: int, data: bytes) -> list[PoolOp]:
    data = bytes(data)
    ops = []
    for dev, local, pos, size in split_range(layout, g, len(data)):
        chunk = data[pos - g : pos - g + size]
        pkt = NetdamPacket(opcode=isa.WRITE, address=layout.device_address(local), length=size, payload=chunk)
        ops.append(PoolOp(dev, pos, pkt))
    return ops


def interleaved_read(layout: PoolLayout, g: int, length: int) -> list[PoolOp]:
    return [
        PoolOp(dev, pos, NetdamPacket(opcode=isa.READ, address=layout.device_address(local), length=size))
        for dev, local, pos, size in split_range(layout, g, length)
    ]


def reassemble(g: int, length: int, pieces: Iterable[tuple[int, bytes]]) -> bytes:
    """Place ``(global_offset, bytes)`` pieces, in any order, into ``[g, g+length)``."""
    out = bytearray(length)
    seen = 0
    for pos, data in pieces:
        out[pos - g : pos - g + len(data)] = data
        seen += len(data)
    if seen != length:
        raise PoolError(f"reassembled {seen} of {length} bytes")
    return bytes(out)


def devices_touched(ops: Sequence[PoolOp]) -> list[int]:
    return [op.device for op in ops]
