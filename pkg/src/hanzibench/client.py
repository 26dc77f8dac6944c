"""Native protocol client: speaks the same wire protocol as the browser
workbench. Used by the simulator's network mode, the test suite, and as a
reference for client implementors."""

from __future__ import annotations

import asyncio
import json
from typing import Optional

from websockets.asyncio.client import connect

from .catalog import PartCatalog
from .engine import (
    Event, PROTOCOL_VERSION, SessionConfig, SessionState, apply_event, digest, restore,
)


class ClientError(Exception):
    pass


class ProtocolClient:
    """Connect, handshake, then mirror the server by folding the snapshot
    plus every received event into a local state copy."""

    def __init__(self, catalog: PartCatalog, config: SessionConfig):
        self.catalog = catalog
        self.config = config
        self.ws = None
        self.user_id: Optional[str] = None
        self.role: Optional[str] = None
        self.state: Optional[SessionState] = None
        self.wire_seq = 1
        self.event_frames: list[str] = []  # raw frames, for stream comparison
        self.events: list[Event] = []
        self.checkpoint_mismatches: list[dict] = []

    async def connect(self, uri: str, name: str) -> None:
        self.ws = await connect(uri)
        await self.ws.send(json.dumps({
            "type": "hello",
            "payload": {"name": name, "protocol_version": PROTOCOL_VERSION},
        }))
        raw = await self.ws.recv()
        doc = json.loads(raw)
        if doc.get("type") == "error":
            raise ClientError(f"{doc['payload']['code']}: {doc['payload']['message']}")
        if doc.get("type") != "welcome":
            raise ClientError(f"expected welcome, got {doc.get('type')}")
        p = doc["payload"]
        self.user_id = p["user_id"]
        self.role = p["role"]
        self.state = restore(self.catalog, self.config, p["snapshot"], p["last_event_seq"])
        if digest(self.state) != p["digest"]:
            raise ClientError("snapshot digest mismatch on welcome")

    async def send(self, ctype: str, payload: Optional[dict] = None) -> None:
        await self.ws.send(json.dumps({
            "type": "command", "seq": self.wire_seq,
            "payload": {"type": ctype, "payload": payload or {}},
        }))
        self.wire_seq += 1

    async def ping(self) -> None:
        await self.ws.send(json.dumps({"type": "ping"}))

    async def pump(self, duration: float = 0.2) -> list[Event]:
        """Apply every frame arriving within the window."""
        got: list[Event] = []
        loop = asyncio.get_event_loop()
        deadline = loop.time() + duration
        while True:
            timeout = deadline - loop.time()
            if timeout <= 0:
                return got
            try:
                raw = await asyncio.wait_for(self.ws.recv(), timeout=timeout)
            except asyncio.TimeoutError:
                return got
            ev = self._handle(raw)
            if ev is not None:
                got.append(ev)

    async def wait_for(self, predicate, timeout: float = 5.0) -> Event:
        loop = asyncio.get_event_loop()
        deadline = loop.time() + timeout
        for ev in self.events:
            if predicate(ev):
                return ev
        while True:
            remaining = deadline - loop.time()
            if remaining <= 0:
                raise asyncio.TimeoutError("no matching event")
            raw = await asyncio.wait_for(self.ws.recv(), timeout=remaining)
            ev = self._handle(raw)
            if ev is not None and predicate(ev):
                return ev

    def _handle(self, raw) -> Optional[Event]:
        doc = json.loads(raw)
        dtype = doc.get("type")
        if dtype == "event":
            self.event_frames.append(raw if isinstance(raw, str) else raw.decode())
            ev = Event(seq=doc["payload"]["seq"], type=doc["payload"]["type"],
                       payload=doc["payload"]["payload"])
            apply_event(self.state, ev)
            self.events.append(ev)
            return ev
        if dtype == "checkpoint":
            p = doc["payload"]
            if p["event_seq"] == self.state.event_seq and p["digest"] != digest(self.state):
                self.checkpoint_mismatches.append(p)
        elif dtype == "error":
            raise ClientError(f"{doc['payload']['code']}: {doc['payload']['message']}")
        return None

    def digest(self) -> str:
        return digest(self.state)

    async def close(self) -> None:
        if self.ws:
            await self.ws.close()
