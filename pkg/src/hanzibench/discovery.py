"""LAN discovery: periodic UDP broadcast of a small announce datagram.

Broadcast keeps desk testing trivial; joining a multicast group is optional
and configured the same way. Bad datagrams and socket errors never take the
session down — direct connect always works without discovery.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
from dataclasses import dataclass
from typing import Optional

log = logging.getLogger(__name__)

ANNOUNCE_MAGIC = "HVRMT1"
ANNOUNCE_INTERVAL = 2.0
MAX_DATAGRAM = 512


@dataclass(frozen=True)
class Announce:
    session_name: str
    host_port: int
    protocol_version: int

    def to_datagram(self) -> bytes:
        data = json.dumps({
            "magic": ANNOUNCE_MAGIC,
            "session_name": self.session_name,
            "host_port": self.host_port,
            "protocol_version": self.protocol_version,
        }, sort_keys=True, separators=(",", ":")).encode("utf-8")
        if len(data) > MAX_DATAGRAM:
            raise ValueError("announce datagram exceeds 512 bytes")
        return data

    @classmethod
    def from_datagram(cls, data: bytes) -> Optional["Announce"]:
        """Parse a datagram; None for anything that isn't ours."""
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return None
        if not isinstance(doc, dict) or doc.get("magic") != ANNOUNCE_MAGIC:
            return None
        try:
            return cls(
                session_name=doc["session_name"],
                host_port=int(doc["host_port"]),
                protocol_version=int(doc["protocol_version"]),
            )
        except (KeyError, TypeError, ValueError):
            return None


class Announcer:
    """Background broadcaster; runs until stop()."""

    def __init__(self, announce: Announce, port: int,
                 target: str = "255.255.255.255", interval: float = ANNOUNCE_INTERVAL):
        self.announce = announce
        self.port = port
        self.target = target
        self.interval = interval
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=self.interval + 1)

    def _run(self) -> None:
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        except OSError as e:
            log.warning("announcer disabled: %s", e)
            return
        datagram = self.announce.to_datagram()
        while not self._stop.is_set():
            try:
                sock.sendto(datagram, (self.target, self.port))
            except OSError as e:
                log.warning("announce send failed: %s", e)
            self._stop.wait(self.interval)
        sock.close()


def discover(port: int, duration: float = 3.0, bind: str = "") -> list[Announce]:
    """Listen for announce datagrams; returns distinct sessions seen."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((bind, port))
    sock.settimeout(0.2)
    seen: dict[tuple, Announce] = {}
    import time
    deadline = time.monotonic() + duration
    while time.monotonic() < deadline:
        try:
            data, _ = sock.recvfrom(2048)
        except socket.timeout:
            continue
        ann = Announce.from_datagram(data)
        if ann is not None:
            seen[(ann.session_name, ann.host_port)] = ann
    sock.close()
    return list(seen.values())
