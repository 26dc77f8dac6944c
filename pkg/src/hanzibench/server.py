"""WebSocket front door: join handshake, command ingress, event fan-out.

Every state change funnels through one asyncio lock around the session loop,
so all clients observe the same event sequence, frame for frame. Each
connection gets its own outbox queue; broadcast appends the identical
serialized frame to every outbox under the lock.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

from websockets.asyncio.server import serve
from websockets.exceptions import ConnectionClosed

from .discovery import Announce, Announcer
from .engine import Command, Event, PROTOCOL_VERSION, digest, logical_doc
from .loop import SessionLoop

log = logging.getLogger(__name__)

CHECKPOINT_EVERY = 50
IDLE_TIMEOUT = 30.0
POSE_MIN_INTERVAL = 0.1  # ≤ 10 pose updates per second per user


def event_frame(ev: Event) -> str:
    return '{"type":"event","payload":' + ev.to_json() + "}"


def error_frame(code: str, message: str) -> str:
    return json.dumps({"type": "error", "payload": {"code": code, "message": message}},
                      sort_keys=True, separators=(",", ":"))


@dataclass
class _Conn:
    ws: object
    user_id: str
    outbox: asyncio.Queue = field(default_factory=asyncio.Queue)
    next_wire_seq: int = 1
    engine_seq: int = 1  # engine-side client_seq already consumed by Join
    last_pose: float = 0.0
    left: bool = False


class SessionServer:
    def __init__(self, session: SessionLoop, host: str = "0.0.0.0", port: int = 7474,
                 announce_port: Optional[int] = 7475,
                 idle_timeout: float = IDLE_TIMEOUT,
                 checkpoint_every: int = CHECKPOINT_EVERY,
                 pump_interval: float = 0.05):
        self.session = session
        self.host = host
        self.port = port
        self.announce_port = announce_port
        self.idle_timeout = idle_timeout
        self.checkpoint_every = checkpoint_every
        self.pump_interval = pump_interval
        self.lock = asyncio.Lock()
        self.conns: list[_Conn] = []
        self._next_user = 1
        self._server = None
        self._announcer: Optional[Announcer] = None
        self._pump_task = None

    async def start(self) -> None:
        self._server = await serve(self._handler, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._pump_task = asyncio.create_task(self._pump())
        if self.announce_port:
            self._announcer = Announcer(
                Announce(session_name=self.session.config.session_name,
                         host_port=self.port, protocol_version=PROTOCOL_VERSION),
                port=self.announce_port,
            )
            self._announcer.start()
        log.info("listening on %s:%d", self.host, self.port)

    async def stop(self) -> None:
        if self._announcer:
            self._announcer.stop()
        if self._pump_task:
            self._pump_task.cancel()
        if self._server:
            self._server.close()
            await self._server.wait_closed()

    async def serve_forever(self) -> None:
        await self._server.wait_closed()

    # --- internals -----------------------------------------------------------

    def _broadcast(self, events: list[Event]) -> None:
        # caller holds self.lock
        for ev in events:
            frame = event_frame(ev)
            for conn in self.conns:
                conn.outbox.put_nowait(frame)
            if self.checkpoint_every and ev.seq % self.checkpoint_every == 0:
                cp = json.dumps(
                    {"type": "checkpoint",
                     "payload": {"event_seq": ev.seq, "digest": digest(self.session.state)}},
                    sort_keys=True, separators=(",", ":"))
                for conn in self.conns:
                    conn.outbox.put_nowait(cp)

    async def _pump(self) -> None:
        while True:
            await asyncio.sleep(self.pump_interval)
            async with self.lock:
                events = self.session.tick()
                if events:
                    self._broadcast(events)

    async def _sender(self, conn: _Conn) -> None:
        try:
            while True:
                frame = await conn.outbox.get()
                await conn.ws.send(frame)
        except (ConnectionClosed, asyncio.CancelledError):
            pass

    async def _handler(self, ws) -> None:
        conn: Optional[_Conn] = None
        sender = None
        try:
            raw = await asyncio.wait_for(ws.recv(), timeout=self.idle_timeout)
            hello = self._parse(raw)
            if hello is None or hello.get("type") != "hello":
                await ws.send(error_frame("MALFORMED", "expected hello"))
                return
            payload = hello.get("payload", {})
            if payload.get("protocol_version") != PROTOCOL_VERSION:
                await ws.send(error_frame(
                    "VERSION_MISMATCH",
                    f"server speaks protocol {PROTOCOL_VERSION}"))
                return

            async with self.lock:
                if len(self.session.state.users) >= self.session.config.max_users:
                    await ws.send(error_frame("SESSION_FULL", "session is full"))
                    return
                user_id = f"u{self._next_user}"
                self._next_user += 1
                name = payload.get("name", user_id)
                events = self.session.command(
                    Command(issuer=user_id, client_seq=1, type="Join",
                            payload={"name": name}))
                self._broadcast(events)
                role = self.session.state.users[user_id]["role"]
                welcome = json.dumps({
                    "type": "welcome",
                    "payload": {
                        "user_id": user_id,
                        "role": role,
                        "snapshot": logical_doc(self.session.state),
                        "last_event_seq": self.session.state.event_seq,
                        "digest": self.session.digest(),
                        "next_seq": 2,
                        "protocol_version": PROTOCOL_VERSION,
                    },
                }, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
                conn = _Conn(ws=ws, user_id=user_id, next_wire_seq=1, engine_seq=1)
                self.conns.append(conn)
            await ws.send(welcome)
            sender = asyncio.create_task(self._sender(conn))
            await self._receive_loop(conn)
        except (ConnectionClosed, asyncio.TimeoutError):
            pass
        finally:
            if sender:
                sender.cancel()
            if conn is not None:
                await self._depart(conn)

    async def _receive_loop(self, conn: _Conn) -> None:
        while True:
            try:
                raw = await asyncio.wait_for(conn.ws.recv(), timeout=self.idle_timeout)
            except asyncio.TimeoutError:
                # idle connection: drop with a synthetic Leave
                await conn.ws.close()
                return
            msg = self._parse(raw)
            if msg is None or "type" not in msg:
                await conn.ws.send(error_frame("MALFORMED", "bad frame"))
                await conn.ws.close()
                return
            mtype = msg["type"]
            if mtype == "ping":
                await conn.ws.send(json.dumps({"type": "pong"}, separators=(",", ":")))
            elif mtype == "command":
                await self._ingress(conn, msg)
            else:
                await conn.ws.send(error_frame("MALFORMED", f"unknown frame type {mtype}"))
                await conn.ws.close()
                return

    async def _ingress(self, conn: _Conn, msg: dict) -> None:
        seq = msg.get("seq")
        if seq != conn.next_wire_seq:
            await conn.ws.send(error_frame(
                "BAD_SEQ", f"expected seq {conn.next_wire_seq}, got {seq}"))
            return
        conn.next_wire_seq += 1
        body = msg.get("payload")
        if not isinstance(body, dict) or "type" not in body:
            await conn.ws.send(error_frame("MALFORMED", "command payload missing type"))
            return
        ctype = body["type"]
        if ctype == "Join":
            await conn.ws.send(error_frame("MALFORMED", "Join is performed by hello"))
            return
        if ctype == "PoseUpdate":
            now = time.monotonic()
            if now - conn.last_pose < POSE_MIN_INTERVAL:
                return  # throttled; presence only, silently dropped
            conn.last_pose = now
        async with self.lock:
            conn.engine_seq += 1
            events = self.session.command(Command(
                issuer=conn.user_id, client_seq=conn.engine_seq,
                type=ctype, payload=body.get("payload", {})))
            self._broadcast(events)
            if ctype == "Leave":
                conn.left = True

    async def _depart(self, conn: _Conn) -> None:
        async with self.lock:
            if conn in self.conns:
                self.conns.remove(conn)
            if not conn.left and conn.user_id in self.session.state.users:
                conn.engine_seq += 1
                events = self.session.command(Command(
                    issuer=conn.user_id, client_seq=conn.engine_seq,
                    type="Leave", payload={}))
                self._broadcast(events)
                conn.left = True

    @staticmethod
    def _parse(raw) -> Optional[dict]:
        try:
            doc = json.loads(raw)
            return doc if isinstance(doc, dict) else None
        except (json.JSONDecodeError, TypeError):
            return None


async def run_server(session: SessionLoop, host: str, port: int,
                     announce_port: Optional[int]) -> None:
    server = SessionServer(session, host=host, port=port, announce_port=announce_port)
    await server.start()
    print(f"hanzibench serving session {session.config.session_name!r} "
          f"on {server.host}:{server.port}", flush=True)
    try:
        await server.serve_forever()
    finally:
        await server.stop()
