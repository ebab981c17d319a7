"""``netdam`` command line: device daemon, single instructions, benches, controller.

Precedence for every option: built-in default < ``NETDAM_<KEY>`` environment
variable < command-line flag < the matching ``[section]`` of ``--config``.
Every failure prints one ``error: <CODE>: <message>`` line to stderr and
exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import struct
import sys
import time


from . import collective, isa
from .addressing import QUEUE_WINDOW, PoolLayout
from .client import NetdamClient, StatusError, bench_latency
from .config import (
    env_overrides,
    format_endpoint,
    load_config,
    parse_dtype,
    parse_endpoint,
    parse_int,
    parse_nodes,
    parse_opcode,
    parse_size,
)
from .daemon import BadConfig, BindFailure, DaemonConfig, DeviceServer
from .device import Device
from .transport import Exhausted, Requester, SimNetConfig, SimNetwork, TransportError, UdpCarrier
from .wire import MAX_PAYLOAD, CodecError, DType

EXIT_STATUS = 1
EXIT_CONFIG = 3


class CliError(Exception):
    def __init__(self, code: str, msg: str, exit_code: int = EXIT_STATUS) -> None:
        super().__init__(msg)
        self.code = code
        self.exit_code = exit_code


def _settings(args, section: str, defaults: dict) -> dict:
    out = dict(defaults)
    out.update(env_overrides(list(defaults)))
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    if getattr(args, "config", None):
        try:
            cfg = load_config(args.config)
        except (OSError, ValueError) as exc:
            raise CliError("BAD_CONFIG", f"{args.config}: {exc}", EXIT_CONFIG) from exc
        out.update({k: v for k, v in cfg.get(section, {}).items() if k in defaults})
        out["_sim"] = cfg.get("sim", {})
    return out


def _emit(args, obj: dict, text: str) -> None:
    print(json.dumps(obj, sort_keys=True) if args.json else text, flush=True)


# --- daemon ---------------------------------------------------------------


def cmd_daemon(args) -> int:
    s = _settings(args, "daemon", {
        "endpoint": "127.0.0.1:7000", "mem_size": "64M", "queue_depth": "1024", "acl": None, "stats_path": None,
    })
    try:
        config = DaemonConfig(
            endpoint=parse_endpoint(s["endpoint"]),
            mem_size=parse_size(s["mem_size"]),
            queue_depth=parse_int(s["queue_depth"]),
            acl_path=s["acl"],
            stats_path=s["stats_path"],
        )
        server = DeviceServer(config)
    except BindFailure as exc:
        raise CliError("BIND_FAILURE", str(exc.strerror or exc), EXIT_CONFIG) from exc
    except (BadConfig, ValueError) as exc:
        raise CliError("BAD_CONFIG", str(exc), EXIT_CONFIG) from exc

    def shutdown(signum, frame):
        server._stop.set()

    def dump(signum, frame):
        text = server.dump_stats()
        if not config.stats_path:
            print(text, file=sys.stderr, flush=True)

    signal.signal(signal.SIGTERM, shutdown)
    signal.signal(signal.SIGINT, shutdown)
    if hasattr(signal, "SIGUSR1"):
        signal.signal(signal.SIGUSR1, dump)
    server.start()
    print(f"listening {format_endpoint(server.endpoint)} mem_size={config.mem_size}", flush=True)
    try:
        while not server._stop.wait(0.2):
            pass
    finally:
        server.stop()
        text = server.dump_stats()
        if not config.stats_path:
            print(text, file=sys.stderr, flush=True)
    return 0


# --- single instructions ----------------------------------------------------


def _operand(args, dtype: int) -> bytes:
    if getattr(args, "values", None):
        vals = [v for v in args.values.split(",") if v.strip()]
        if dtype == DType.FLOAT32:
            return struct.pack(f">{len(vals)}f", *map(float, vals))
        if dtype == DType.INT32:
            return struct.pack(f">{len(vals)}i", *(int(v, 0) for v in vals))
        return bytes(int(v, 0) for v in vals)
    return bytes.fromhex(args.data or "")


def cmd_client(args) -> int:
    s = _settings(args, "client", {"endpoint": "127.0.0.1:7000", "timeout": "0.2", "attempts": "8"})
    endpoint = parse_endpoint(s["endpoint"])
    client = NetdamClient.udp(timeout=float(s["timeout"]), max_attempts=int(s["attempts"]))
    try:
        req = client.requester
        t0 = req.carrier.now()
        verb = args.verb
        if verb == "read":
            ack = client.read(endpoint, parse_int(args.address), parse_int(args.length))
        elif verb == "write":
            ack = client.write(endpoint, parse_int(args.address), bytes.fromhex(args.data))
        elif verb == "cas":
            ack = client.cas(endpoint, parse_int(args.address), parse_int(args.compare), parse_int(args.swap))
        elif verb == "memcopy":
            ack = client.memcopy(endpoint, parse_int(args.src), parse_int(args.dst), parse_int(args.length))
        elif verb == "simd":
            dtype = parse_dtype(args.dtype)
            ack = client.simd(endpoint, parse_opcode(args.op), parse_int(args.address), _operand(args, dtype), dtype, args.target)
        elif verb == "hash":
            ack = client.call(endpoint, _packet(isa.BLOCK_HASH, parse_int(args.address), parse_int(args.length)))
        else:  # pragma: no cover - argparse restricts verbs
            raise CliError("BAD_ARGS", f"unknown verb {verb}")
        latency = (req.carrier.now() - t0) * 1e6
    finally:
        client.close()
    status = isa.Status(ack.status).name
    out = {"status": status, "sequence": ack.sequence, "latency_us": round(latency, 1), "payload": ack.payload.hex()}
    if args.verb == "cas" and len(ack.payload) == 8:
        out["old"] = int.from_bytes(ack.payload, "big")
    if args.verb == "hash" and len(ack.payload) == 8:
        out["hash"] = int.from_bytes(ack.payload, "big")
    text = f"status={status} latency_us={latency:.1f} payload={ack.payload.hex()}"
    if "old" in out:
        text += f" old={out['old']}"
    if "hash" in out:
        text += f" hash={out['hash']:#018x}"
    _emit(args, out, text)
    if ack.status != isa.Status.OK:
        raise CliError(status, f"{args.verb} on {format_endpoint(endpoint)} failed")
    return 0


def _packet(opcode: int, address: int, length: int):
    from .wire import NetdamPacket

    return NetdamPacket(opcode=opcode, address=address, length=length)


# --- benches ----------------------------------------------------------------


def cmd_bench_latency(args) -> int:
    s = _settings(args, "bench", {
        "endpoint": "127.0.0.1:7000", "op": "read", "size": "128", "count": "1000", "timeout": "0.2", "attempts": "8",
    })
    client = NetdamClient.udp(timeout=float(s["timeout"]), max_attempts=int(s["attempts"]))
    try:
        report = bench_latency(
            client, parse_endpoint(s["endpoint"]), parse_opcode(s["op"]),
            size=parse_size(s["size"]), count=parse_int(s["count"]), address=QUEUE_WINDOW,
        )
    finally:
        client.close()
    _emit(args, report.to_dict(), report.summary())
    return 0


def _harness(n: int, mem_size: int, sim: SimNetConfig, attempts: int) -> tuple[list, Requester, list[Device]]:
    net = SimNetwork(sim, trace=False)
    nodes = [(f"10.0.0.{i + 1}", 7000) for i in range(n)]
    devices = []
    for ep in nodes:
        dev = Device(mem_size, name=format_endpoint(ep))
        net.attach_device(ep, dev)
        devices.append(dev)
    return nodes, Requester(net.carrier(("10.0.0.254", 9000)), max_attempts=attempts), devices


def cmd_allreduce(args) -> int:
    s = _settings(args, "allreduce", {
        "nodes": None, "len": "1048576", "chunk": "2048", "seed": "0", "sim_loss": None, "sim_dup": "0",
        "sim_reorder": "0", "sim_nodes": "4", "attempts": None, "timeout": None, "window": None,
    })
    length, chunk, seed = parse_size(s["len"]), parse_int(s["chunk"]), parse_int(s["seed"])
    harness = args.sim or s["sim_loss"] is not None or not s["nodes"]
    if harness:
        simcfg = dict(s.get("_sim", {}))
        simcfg.setdefault("loss", float(s["sim_loss"] or 0.0))
        simcfg.setdefault("duplicate", float(s["sim_dup"]))
        simcfg.setdefault("reorder", float(s["sim_reorder"]))
        simcfg.setdefault("seed", seed)
        n = len(parse_nodes(s["nodes"])) if s["nodes"] else parse_int(s["sim_nodes"])
        attempts = int(s["attempts"] or 64)
        nodes, req, _ = _harness(n, QUEUE_WINDOW + 4 * length + MAX_PAYLOAD, SimNetConfig.from_mapping(simcfg), attempts)
        mode = "sim"
    else:
        nodes = parse_nodes(s["nodes"])
        req = Requester(
            UdpCarrier(("127.0.0.1", 0) if all(h == "127.0.0.1" for h, _ in nodes) else ("0.0.0.0", 0)),
            timeout=float(s["timeout"]) if s["timeout"] else None,
            max_attempts=int(s["attempts"] or 16),
            window=int(s["window"] or 64),
        )
        mode = "udp"
    try:
        plan = collective.plan_ring(nodes, length, chunk)
        vectors = collective.seeded_vectors(len(nodes), length, seed)
        for i, v in enumerate(vectors):
            collective.load_vector(plan, req, i, v)
        t0 = time.perf_counter()
        result = collective.allreduce(plan, req, raise_on_failure=False)
        wall = time.perf_counter() - t0
        verdict, detail = "FAIL", ""
        if result.ok:
            try:
                collective.verify(plan, req, vectors)
                verdict = "PASS"
            except collective.VerificationFailed as exc:
                detail = str(exc)
        else:
            detail = "chunk failures: " + json.dumps(result.reduce_scatter.to_dict()["failed"] | result.all_gather.to_dict()["failed"])
    finally:
        close = getattr(req.carrier, "close", None)
        if close and mode == "udp":
            close()
    report = result.to_dict()
    report.update(mode=mode, verdict=verdict, wall_s=wall, nodes=len(nodes), vector_length=length, chunk_elems=chunk, seed=seed)
    text = (
        f"{verdict} allreduce n={len(nodes)} len={length} chunk={chunk} mode={mode} "
        f"wall={wall:.3f}s retries={result.total_retries} "
        f"bandwidth={4 * length / wall / 1e6 if wall > 0 else 0:.1f}MB/s"
    )
    _emit(args, report, text)
    if verdict != "PASS":
        raise CliError("VERIFICATION_FAILED", detail or "allreduce failed")
    return 0


# --- controller -------------------------------------------------------------


def cmd_controller(args) -> int:
    import uvicorn

    from .service import Controller, create_app

    s = _settings(args, "controller", {
        "nodes": None, "block_size": "8192", "span": "1M", "listen": "127.0.0.1:8080", "sim_nodes": "4",
    })
    block, span = parse_size(s["block_size"]), parse_size(s["span"])
    try:
        if args.sim or not s["nodes"]:
            ctl = Controller.in_process(parse_int(s["sim_nodes"]), span=span, block_size=block, sim=SimNetConfig(**s.get("_sim", {})))
        else:
            ctl = Controller.udp(PoolLayout(tuple(parse_nodes(s["nodes"])), span=span, block_size=block))
    except ValueError as exc:
        raise CliError("BAD_CONFIG", str(exc), EXIT_CONFIG) from exc
    host, port = parse_endpoint(s["listen"])
    uvicorn.run(create_app(ctl), host=host, port=port, log_level="warning")
    return 0


def cmd_pool(args) -> int:
    import httpx

    s = _settings(args, "pool", {"controller": "http://127.0.0.1:8080"})
    base = s["controller"].rstrip("/")
    verb = args.verb
    if verb == "show":
        method, path, body = "GET", "/pool", None
    elif verb == "alloc":
        method, path, body = "POST", "/pool/alloc", {"size": parse_size(args.size), "owner": args.owner or ""}
    elif verb == "free":
        method, path, body = "POST", "/pool/free", {"id": int(args.id)}
    elif verb == "write":
        method, path, body = "POST", f"/pool/{int(args.id)}/write", {"offset": parse_int(args.offset), "data_hex": args.data}
    else:
        method, path, body = "POST", f"/pool/{int(args.id)}/read", {"offset": parse_int(args.offset), "length": parse_int(args.length)}
    try:
        resp = httpx.request(method, base + path, json=body, timeout=60)
    except httpx.HTTPError as exc:
        raise CliError("CONTROLLER_UNREACHABLE", str(exc)) from exc
    data = resp.json()
    if resp.status_code >= 400:
        code = data.get("error", f"HTTP_{resp.status_code}") if isinstance(data, dict) else f"HTTP_{resp.status_code}"
        raise CliError(code, str(data.get("detail", data)) if isinstance(data, dict) else str(data))
    print(json.dumps(data, sort_keys=True) if args.json or verb in ("show", "alloc") else _pool_text(verb, data), flush=True)
    return 0


def _pool_text(verb: str, data: dict) -> str:
    if verb == "read":
        return data["data_hex"]
    return " ".join(f"{k}={v}" for k, v in sorted(data.items()))


# --- wiring -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netdam", description="Network-attached memory devices over UDP.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, json_flag=True):
        sp.add_argument("--config", help="TOML file; its [section] overrides flags")
        if json_flag:
            sp.add_argument("--json", action="store_true", help="print a JSON report")
        return sp

    d = common(sub.add_parser("daemon", help="run a device"), json_flag=False)
    d.add_argument("--endpoint")
    d.add_argument("--mem-size", dest="mem_size")
    d.add_argument("--queue-depth", dest="queue_depth")
    d.add_argument("--acl")
    d.add_argument("--stats-path", dest="stats_path")
    d.set_defaults(func=cmd_daemon)

    c = sub.add_parser("client", help="issue one instruction")
    verbs = c.add_subparsers(dest="verb", required=True)

    def verb(name, *positional, **extra):
        sp = common(verbs.add_parser(name))
        sp.add_argument("--endpoint")
        sp.add_argument("--timeout")
        sp.add_argument("--attempts")
        for arg in positional:
            sp.add_argument(arg)
        sp.set_defaults(func=cmd_client)
        return sp

    verb("read", "address", "length")
    verb("write", "address", "data")
    verb("cas", "address", "compare", "swap")
    verb("memcopy", "src", "dst", "length")
    sp = verb("simd", "op", "address")
    sp.add_argument("data", nargs="?", help="operand bytes as hex")
    sp.add_argument("--values", help="comma-separated operand values in --dtype")
    sp.add_argument("--dtype", default="float32")
    sp.add_argument("--target", action="store_true", help="chain mode: result returned, memory untouched")
    verb("hash", "address", "length")

    b = common(sub.add_parser("bench-latency", help="sequential round-trip latency"))
    b.add_argument("--endpoint")
    b.add_argument("--op")
    b.add_argument("--size")
    b.add_argument("--count")
    b.add_argument("--timeout")
    b.add_argument("--attempts")
    b.set_defaults(func=cmd_bench_latency)

    a = common(sub.add_parser("allreduce", help="ring allreduce with oracle verification"))
    a.add_argument("--nodes", help="comma-separated host:port list of running daemons")
    a.add_argument("--len", dest="len")
    a.add_argument("--chunk")
    a.add_argument("--seed")
    a.add_argument("--sim", action="store_true", help="run in-process devices on the simulated network")
    a.add_argument("--sim-loss", dest="sim_loss", help="harness mode with this loss probability")
    a.add_argument("--sim-dup", dest="sim_dup")
    a.add_argument("--sim-reorder", dest="sim_reorder")
    a.add_argument("--sim-nodes", dest="sim_nodes")
    a.add_argument("--attempts")
    a.add_argument("--timeout")
    a.add_argument("--window")
    a.set_defaults(func=cmd_allreduce)

    ct = common(sub.add_parser("controller", help="serve the pool controller HTTP API"), json_flag=False)
    ct.add_argument("--nodes")
    ct.add_argument("--block-size", dest="block_size")
    ct.add_argument("--span")
    ct.add_argument("--listen")
    ct.add_argument("--sim", action="store_true")
    ct.add_argument("--sim-nodes", dest="sim_nodes")
    ct.set_defaults(func=cmd_controller)

    pl = sub.add_parser("pool", help="pool operations through a running controller")
    pverbs = pl.add_subparsers(dest="verb", required=True)
    for name, pos in (("show", ()), ("alloc", ("size",)), ("free", ("id",)), ("write", ("id", "offset", "data")), ("read", ("id", "offset", "length"))):
        sp = common(pverbs.add_parser(name))
        sp.add_argument("--controller")
        for arg in pos:
            sp.add_argument(arg)
        if name == "alloc":
            sp.add_argument("--owner")
        sp.set_defaults(func=cmd_pool)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr, flush=True)
        return exc.exit_code
    except Exhausted as exc:
        print(f"error: EXHAUSTED: {exc}", file=sys.stderr, flush=True)
        return EXIT_STATUS
    except StatusError as exc:
        print(f"error: {exc.status.name}: {exc}", file=sys.stderr, flush=True)
        return EXIT_STATUS
    except (CodecError, TransportError) as exc:
        print(f"error: {type(exc).__name__.upper()}: {exc}", file=sys.stderr, flush=True)
        return EXIT_STATUS
    except ValueError as exc:
        print(f"error: BAD_ARGS: {exc}", file=sys.stderr, flush=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
