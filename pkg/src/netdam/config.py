"""Parsing helpers and config-file loading shared by the CLI and the controller."""

from __future__ import annotations

import os
import re
import sys
from pathlib import Path

from . import isa
from .wire import DType, Endpoint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "NETDAM_"

_SIZE = re.compile(r"^\s*(0x[0-9a-fA-F]+|\d+)\s*([kKmMgG]i?[bB]?|[bB])?\s*$")
_UNITS = {"": 1, "b": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_size(text: str | int) -> int:
    """``65536``, ``0x10000``, ``64K``, ``64MiB``, ``2G``: binary units."""
    if isinstance(text, int):
        return text
    m = _SIZE.match(text)
    if not m:
        raise ValueError(f"bad size {text!r}")
    num, unit = m.groups()
    return int(num, 0) * _UNITS[(unit or "")[:1].lower()]


def parse_int(text: str | int) -> int:
    return text if isinstance(text, int) else int(text, 0)


def parse_endpoint(text: str | Endpoint) -> Endpoint:
    if isinstance(text, (tuple, list)):
        return (str(text[0]), int(text[1]))
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint {text!r} is not host:port")
    return (host, int(port))


def format_endpoint(ep: Endpoint) -> str:
    return f"{ep[0]}:{ep[1]}"


def parse_nodes(text: str | list) -> list[Endpoint]:
    items = text if isinstance(text, list) else [t for t in text.split(",") if t.strip()]
    return [parse_endpoint(t.strip() if isinstance(t, str) else t) for t in items]


def parse_opcode(text: str | int) -> int:
    if isinstance(text, int):
        return text
    name = text.strip().upper()
    if name in isa.OPCODES_BY_NAME:
        return isa.OPCODES_BY_NAME[name]
    if "SIMD_" + name in isa.OPCODES_BY_NAME:
        return isa.OPCODES_BY_NAME["SIMD_" + name]
    return int(text, 0)


def parse_dtype(text: str | int) -> int:
    if isinstance(text, int):
        return DType(text)
    name = text.strip().upper()
    aliases = {"U8": "BYTE", "BYTES": "BYTE", "I32": "INT32", "F32": "FLOAT32", "FLOAT": "FLOAT32", "INT": "INT32"}
    name = aliases.get(name, name)
    if name in DType.__members__:
        return DType[name]
    return DType(int(text, 0))


def load_config(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def env_overrides(keys: list[str], environ=None) -> dict:
    """``NETDAM_MEM_SIZE=64M`` -> ``{"mem_size": "64M"}`` for each known key."""
    environ = os.environ if environ is None else environ
    out = {}
    for key in keys:
        val = environ.get(ENV_PREFIX + key.upper())
        if val is not None:
            out[key] = val
    return out
