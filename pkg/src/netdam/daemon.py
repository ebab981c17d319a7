"""UDP device daemon: a receive thread feeding one execution pipeline."""

from __future__ import annotations

import errno
import json
import logging
import queue
import socket
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .addressing import DEFAULT_BLOCK_SIZE, QUEUE_WINDOW, AclParseError, load_acl
from .device import DEFAULT_MEM_SIZE, DEFAULT_QUEUE_DEPTH, Device
from .wire import Endpoint

log = logging.getLogger(__name__)


class BadConfig(ValueError):
    pass


class BindFailure(OSError):
    pass


@dataclass
class DaemonConfig:
    endpoint: Endpoint = ("127.0.0.1", 7000)
    mem_size: int = DEFAULT_MEM_SIZE
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    acl_path: Optional[str] = None
    stats_path: Optional[str] = None

    def validate(self) -> None:
        if self.mem_size < QUEUE_WINDOW + DEFAULT_BLOCK_SIZE:
            raise BadConfig(f"mem_size must be at least {QUEUE_WINDOW + DEFAULT_BLOCK_SIZE} bytes")
        if self.queue_depth < 1:
            raise BadConfig("queue_depth must be positive")


class DeviceServer:
    def __init__(self, config: DaemonConfig) -> None:
        config.validate()
        self.config = config
        acl = None
        if config.acl_path:
            try:
                acl = load_acl(config.acl_path)
            except AclParseError as exc:
                raise BadConfig(f"{config.acl_path}: {exc}") from exc
            except OSError as exc:
                raise BadConfig(f"{config.acl_path}: {exc.strerror}") from exc
        self.device = Device(config.mem_size, queue_depth=config.queue_depth, acl=acl, name=f"{config.endpoint[0]}:{config.endpoint[1]}")
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        try:
            self.sock.bind(tuple(config.endpoint))
        except OSError as exc:
            self.sock.close()
            if exc.errno in (errno.EADDRINUSE, errno.EADDRNOTAVAIL, errno.EACCES):
                raise BindFailure(exc.errno, f"cannot bind {config.endpoint}: {exc.strerror}") from exc
            raise
        self.endpoint: Endpoint = self.sock.getsockname()
        self.intake: queue.Queue = queue.Queue(maxsize=config.queue_depth)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> DeviceServer:
        self.sock.settimeout(0.1)
        for target in (self._receive_loop, self._pipeline_loop):
            t = threading.Thread(target=target, name=f"netdam-{target.__name__}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("device listening on %s:%d (%d bytes)", *self.endpoint, self.config.mem_size)
        return self

    def _receive_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, src = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    return
                continue
            try:
                self.intake.put_nowait((data, src))
            except queue.Full:
                self.device.stats.drops["intake_full"] += 1

    def _pipeline_loop(self) -> None:
        while True:
            item = self.intake.get()
            if item is None:
                return
            data, src = item
            for dst, out in self.device.handle_datagram(data, src):
                try:
                    self.sock.sendto(out, tuple(dst))
                except OSError as exc:
                    self.device.stats.drops["send_error"] += 1
                    log.debug("send to %s failed: %s", dst, exc)

    def stats_report(self) -> dict:
        return {
            "endpoint": f"{self.endpoint[0]}:{self.endpoint[1]}",
            "mem_size": self.config.mem_size,
            "intake_depth": self.intake.qsize(),
            **self.device.stats.to_dict(),
        }

    def dump_stats(self) -> str:
        text = json.dumps(self.stats_report(), indent=2, sort_keys=True)
        if self.config.stats_path:
            Path(self.config.stats_path).write_text(text + "\n")
        return text

    def stop(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        self.intake.put(None)
        for t in self._threads:
            t.join(timeout=2)
        self.sock.close()

    def serve_forever(self) -> None:
        self.start()
        try:
            self._stop.wait()
        finally:
            self.stop()

    def __enter__(self) -> DeviceServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
