"""Authoritative session state machine.

All mutation flows through a totally ordered event log: commands are
validated against the current state, turned into events, and the events are
applied one by one. Replaying the same events over the same catalog/config
always reproduces the same state, so the state digest doubles as a
consistency check between server and clients.

Pose updates are presence-only: they occupy event sequence slots but are
excluded from the digest, which covers logical state only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .catalog import PartCatalog, splice, verify_assembly

PROTOCOL_VERSION = 1

# Zones
SPEECH_AREA = "speech"
MODEL_AREA = "model"
CHARACTER_AREA = "character"
VERIFICATION_ZONE = "verification"
ZONES = (SPEECH_AREA, MODEL_AREA, CHARACTER_AREA, VERIFICATION_ZONE)

# Error codes
E_UNKNOWN_INSTANCE = "UNKNOWN_INSTANCE"
E_GRAB_CONFLICT = "GRAB_CONFLICT"
E_NOT_HOLDER = "NOT_HOLDER"
E_NO_RECIPE = "NO_RECIPE"
E_CARD_MISMATCH = "CARD_MISMATCH"
E_CARD_SPENT = "CARD_SPENT"
E_BAD_STATE = "BAD_STATE"
E_BAD_SEQ = "BAD_SEQ"
E_UNKNOWN_USER = "UNKNOWN_USER"
E_UNKNOWN_TASK = "UNKNOWN_TASK"


class ReplayError(Exception):
    """Event log is malformed or has a sequence gap."""


@dataclass
class SessionConfig:
    session_name: str = "session"
    max_users: int = 8
    spawn: list = field(default_factory=list)  # [{"part": PartId, "count": int}]

    @classmethod
    def from_dict(cls, doc: dict) -> "SessionConfig":
        return cls(
            session_name=doc.get("session_name", "session"),
            max_users=doc.get("max_users", 8),
            spawn=doc.get("spawn", []),
        )


@dataclass
class Command:
    issuer: str
    client_seq: int
    type: str
    payload: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Event:
    seq: int
    type: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "type": self.type, "payload": self.payload},
            sort_keys=True, separators=(",", ":"), ensure_ascii=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Event":
        doc = json.loads(line)
        return cls(seq=doc["seq"], type=doc["type"], payload=doc["payload"])


@dataclass(frozen=True)
class PipelineRequest:
    kind: str  # "extract" | "image" | "model3d"
    task_id: str
    payload: dict


@dataclass(frozen=True)
class PipelineResult:
    kind: str  # "core_character" | "image" | "model" | "failed"
    task_id: str
    payload: dict


@dataclass
class SessionState:
    catalog: PartCatalog
    config: SessionConfig
    users: dict = field(default_factory=dict)
    instances: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)
    cards: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    poses: dict = field(default_factory=dict)  # ephemeral, not in digest
    counters: dict = field(default_factory=dict)
    event_seq: int = 0
    client_seqs: dict = field(default_factory=dict)  # transport bookkeeping


def create_session(catalog: PartCatalog, config: SessionConfig) -> SessionState:
    state = SessionState(catalog=catalog, config=config)
    state.counters = {"instance": 1, "task": 1, "card": 1, "model": 1, "join": 1}
    for entry in config.spawn:
        part = entry["part"]
        catalog.part(part)  # raises UnknownPart on bad config
        for _ in range(int(entry.get("count", 1))):
            iid = f"i{state.counters['instance']}"
            state.counters["instance"] += 1
            state.instances[iid] = {"part": part, "location": {"zone": CHARACTER_AREA}}
    return state


# --- event application (the replayable fold) ---------------------------------

def apply_event(state: SessionState, event: Event) -> None:
    if event.seq != state.event_seq + 1:
        raise ReplayError(f"event seq gap: expected {state.event_seq + 1}, got {event.seq}")
    state.event_seq = event.seq
    p = event.payload
    t = event.type

    if t == "UserJoined":
        state.users[p["user_id"]] = {
            "name": p["name"], "role": p["role"],
            "join_order": state.counters["join"],
        }
        state.counters["join"] += 1
        state.poses[p["user_id"]] = {"x": 0.0, "y": 0.0, "yaw": 0.0}
    elif t == "UserLeft":
        uid = p["user_id"]
        was_host = state.users[uid]["role"] == "host"
        del state.users[uid]
        state.poses.pop(uid, None)
        for inst in state.instances.values():
            if inst["location"] == {"held_by": uid}:
                inst["location"] = {"zone": CHARACTER_AREA}
        if was_host and state.users:
            # longest-connected remaining user takes over
            new_host = min(state.users, key=lambda u: state.users[u]["join_order"])
            state.users[new_host]["role"] = "host"
    elif t == "TaskCreated":
        state.tasks[p["task_id"]] = {
            "owner": p["user_id"], "text": p["text"],
            "core_character": None, "image": None,
            "model_id": None, "card_issued": False, "failed": False,
        }
        state.counters["task"] += 1
    elif t == "CoreCharacterExtracted":
        state.tasks[p["task_id"]]["core_character"] = p["character"]
    elif t == "TaskFailed":
        state.tasks[p["task_id"]]["failed"] = True
    elif t == "ImageReady":
        state.tasks[p["task_id"]]["image"] = {"uri": p["uri"], "digest": p["digest"]}
    elif t == "ModelJobStarted":
        state.models[p["model_id"]] = {
            "task_id": p["task_id"], "state": "generating", "asset": None,
        }
        state.tasks[p["task_id"]]["model_id"] = p["model_id"]
        state.counters["model"] += 1
    elif t == "ModelReady":
        model = state.models[p["model_id"]]
        model["state"] = "unactivated"
        model["asset"] = {"uri": p["uri"], "digest": p["digest"]}
    elif t == "Grabbed":
        state.instances[p["instance_id"]]["location"] = {"held_by": p["user_id"]}
    elif t == "PlacedInZone":
        state.instances[p["instance_id"]]["location"] = {"zone": p["zone"]}
    elif t == "SpliceSucceeded":
        for iid in p["consumed"]:
            del state.instances[iid]
        state.instances[p["produced"]] = {
            "part": p["part"], "location": {"held_by": p["user_id"]},
        }
        state.counters["instance"] += 1
    elif t == "SpliceRejected":
        pass
    elif t == "VerificationSucceeded":
        state.cards[p["card_id"]] = {
            "character": p["character"], "owner": p["owner"], "state": "unspent",
        }
        state.tasks[p["task_id"]]["card_issued"] = True
        state.counters["card"] += 1
    elif t == "VerificationFailed":
        pass
    elif t == "CardSpent":
        state.cards[p["card_id"]]["state"] = "spent"
    elif t == "ModelActivated":
        state.models[p["model_id"]]["state"] = "activated"
    elif t == "PoseUpdated":
        if p["user_id"] in state.poses:
            state.poses[p["user_id"]] = {"x": p["x"], "y": p["y"], "yaw": p["yaw"]}
    elif t == "Error":
        pass
    else:
        raise ReplayError(f"unknown event type: {t}")


# --- command handling --------------------------------------------------------

def handle_command(state: SessionState, cmd: Command):
    """Validate a command, emit and apply its events.

    Returns (events, pipeline_requests). The state object is updated in
    place; every change goes through apply_event.
    """
    events: list[Event] = []
    requests: list[PipelineRequest] = []

    def emit(etype: str, payload: dict) -> Event:
        ev = Event(seq=state.event_seq + 1, type=etype, payload=payload)
        apply_event(state, ev)
        events.append(ev)
        return ev

    def err(code: str, message: str) -> None:
        emit("Error", {"code": code, "message": message, "user_id": cmd.issuer})

    uid = cmd.issuer
    expected = state.client_seqs.get(uid, 0) + 1
    if cmd.client_seq != expected:
        err(E_BAD_SEQ, f"expected client_seq {expected}, got {cmd.client_seq}")
        return events, requests

    if cmd.type != "Join" and uid not in state.users:
        err(E_UNKNOWN_USER, f"user {uid} not in session")
        return events, requests
    state.client_seqs[uid] = cmd.client_seq

    if cmd.type == "Join":
        if uid in state.users:
            err(E_BAD_STATE, f"user {uid} already joined")
        elif len(state.users) >= state.config.max_users:
            err(E_BAD_STATE, "session full")
        else:
            role = "host" if not state.users else "client"
            emit("UserJoined", {"user_id": uid, "name": cmd.payload.get("name", uid), "role": role})

    elif cmd.type == "Leave":
        emit("UserLeft", {"user_id": uid})
        state.client_seqs.pop(uid, None)

    elif cmd.type == "Speak":
        text = cmd.payload.get("text", "")
        if not text:
            err(E_BAD_STATE, "empty utterance")
        else:
            tid = f"t{state.counters['task']}"
            emit("TaskCreated", {"task_id": tid, "user_id": uid, "text": text})
            requests.append(PipelineRequest("extract", tid, {"text": text}))

    elif cmd.type == "Grab":
        iid = cmd.payload.get("instance_id")
        inst = state.instances.get(iid)
        if inst is None:
            err(E_UNKNOWN_INSTANCE, f"no instance {iid}")
        elif inst["location"].get("held_by", uid) != uid:
            err(E_GRAB_CONFLICT, f"instance {iid} held by {inst['location']['held_by']}")
        else:
            emit("Grabbed", {"instance_id": iid, "user_id": uid})

    elif cmd.type == "Release":
        zone = cmd.payload.get("zone", CHARACTER_AREA)
        if zone not in ZONES:
            err(E_BAD_STATE, f"unknown zone {zone}")
        else:
            held = sorted(
                iid for iid, inst in state.instances.items()
                if inst["location"] == {"held_by": uid}
            )
            for iid in held:
                emit("PlacedInZone", {"instance_id": iid, "zone": zone, "user_id": uid})

    elif cmd.type == "PlaceInZone":
        _place_in_zone(state, cmd, emit, err)

    elif cmd.type == "Splice":
        _splice(state, cmd, emit, err)

    elif cmd.type == "GenerateModel":
        tid = cmd.payload.get("task_id")
        task = state.tasks.get(tid)
        if task is None:
            err(E_UNKNOWN_TASK, f"no task {tid}")
        elif task["image"] is None:
            err(E_BAD_STATE, f"task {tid} has no image yet")
        elif task["model_id"] is not None:
            err(E_BAD_STATE, f"task {tid} already has a model")
        else:
            mid = f"m{state.counters['model']}"
            emit("ModelJobStarted", {"model_id": mid, "task_id": tid})
            requests.append(PipelineRequest("model3d", tid, {
                "model_id": mid, "image_uri": task["image"]["uri"],
                "image_digest": task["image"]["digest"],
            }))

    elif cmd.type == "ActivateModel":
        _activate_model(state, cmd, emit, err)

    elif cmd.type == "PoseUpdate":
        p = cmd.payload
        emit("PoseUpdated", {
            "user_id": uid,
            "x": float(p.get("x", 0.0)), "y": float(p.get("y", 0.0)),
            "yaw": float(p.get("yaw", 0.0)),
        })

    else:
        err(E_BAD_STATE, f"unknown command type {cmd.type}")

    return events, requests


def _splice(state: SessionState, cmd: Command, emit, err) -> None:
    uid = cmd.issuer
    ia, ib = cmd.payload.get("instance_a"), cmd.payload.get("instance_b")
    inst_a, inst_b = state.instances.get(ia), state.instances.get(ib)
    if inst_a is None or inst_b is None or ia == ib:
        err(E_UNKNOWN_INSTANCE, f"bad splice operands ({ia}, {ib})")
        return

    def usable(inst) -> bool:
        loc = inst["location"]
        return loc == {"held_by": uid} or loc == {"zone": CHARACTER_AREA}

    held = [i for i in (inst_a, inst_b) if i["location"] == {"held_by": uid}]
    if not held or not (usable(inst_a) and usable(inst_b)):
        err(E_NOT_HOLDER, "splice needs one held input; the other held or on the bench")
        return

    result = splice(state.catalog, inst_a["part"], inst_b["part"])
    if result is None:
        emit("SpliceRejected", {
            "user_id": uid, "instance_a": ia, "instance_b": ib,
            "part_a": inst_a["part"], "part_b": inst_b["part"],
        })
        return
    produced = f"i{state.counters['instance']}"
    emit("SpliceSucceeded", {
        "user_id": uid, "consumed": [ia, ib], "produced": produced, "part": result,
    })


def _place_in_zone(state: SessionState, cmd: Command, emit, err) -> None:
    uid = cmd.issuer
    iid = cmd.payload.get("instance_id")
    zone = cmd.payload.get("zone")
    inst = state.instances.get(iid)
    if inst is None:
        err(E_UNKNOWN_INSTANCE, f"no instance {iid}")
        return
    if zone not in ZONES:
        err(E_BAD_STATE, f"unknown zone {zone}")
        return
    if inst["location"] != {"held_by": uid}:
        err(E_NOT_HOLDER, f"instance {iid} is not held by {uid}")
        return
    emit("PlacedInZone", {"instance_id": iid, "zone": zone, "user_id": uid})
    if zone != VERIFICATION_ZONE:
        return

    # Verify against the issuer's most recent task that has a core character
    # and no card yet. The placed instance stays in the zone either way.
    candidates = [
        tid for tid, task in state.tasks.items()
        if task["owner"] == uid and task["core_character"] is not None
        and not task["card_issued"] and not task["failed"]
    ]
    if not candidates:
        emit("VerificationFailed", {
            "user_id": uid, "instance_id": iid, "reason": "no pending task",
        })
        return
    tid = max(candidates, key=lambda t: int(t[1:]))
    target = state.tasks[tid]["core_character"]
    if verify_assembly(state.catalog, inst["part"], target):
        card_id = f"c{state.counters['card']}"
        emit("VerificationSucceeded", {
            "card_id": card_id, "character": target, "owner": uid,
            "task_id": tid, "instance_id": iid,
        })
    else:
        emit("VerificationFailed", {
            "user_id": uid, "instance_id": iid, "reason": "label mismatch",
            "task_id": tid,
        })


def _activate_model(state: SessionState, cmd: Command, emit, err) -> None:
    uid = cmd.issuer
    mid, cid = cmd.payload.get("model_id"), cmd.payload.get("card_id")
    model = state.models.get(mid)
    card = state.cards.get(cid)
    if model is None or card is None:
        err(E_BAD_STATE, f"unknown model {mid} or card {cid}")
        return
    if model["state"] != "unactivated":
        err(E_BAD_STATE, f"model {mid} is {model['state']}, not unactivated")
        return
    if card["state"] != "unspent":
        err(E_CARD_SPENT, f"card {cid} already spent")
        return
    core = state.tasks[model["task_id"]]["core_character"]
    if card["owner"] != uid or card["character"] != core:
        err(E_CARD_MISMATCH, f"card {cid} does not match model {mid}")
        return
    emit("ModelActivated", {"model_id": mid, "card_id": cid})
    emit("CardSpent", {"card_id": cid})


# --- pipeline results --------------------------------------------------------

def ingest_pipeline_result(state: SessionState, result: PipelineResult):
    """Apply an asynchronous pipeline completion to the session."""
    events: list[Event] = []
    requests: list[PipelineRequest] = []

    def emit(etype: str, payload: dict) -> None:
        ev = Event(seq=state.event_seq + 1, type=etype, payload=payload)
        apply_event(state, ev)
        events.append(ev)

    task = state.tasks.get(result.task_id)
    if task is None:
        emit("Error", {"code": E_UNKNOWN_TASK, "message": f"no task {result.task_id}"})
        return events, requests

    if result.kind == "core_character":
        reply = result.payload["text"].strip()
        if task["core_character"] is not None or task["failed"]:
            emit("Error", {"code": E_BAD_STATE, "message": f"task {result.task_id} already resolved"})
        elif len(reply) != 1:
            emit("Error", {
                "code": E_BAD_STATE,
                "message": f"extraction for {result.task_id} returned {reply!r}, not one character",
            })
            emit("TaskFailed", {"task_id": result.task_id, "reason": "not one character"})
        else:
            emit("CoreCharacterExtracted", {"task_id": result.task_id, "character": reply})
            requests.append(PipelineRequest("image", result.task_id, {"character": reply}))
    elif result.kind == "image":
        if task["image"] is not None:
            emit("Error", {"code": E_BAD_STATE, "message": f"task {result.task_id} already has an image"})
        else:
            emit("ImageReady", {
                "task_id": result.task_id,
                "uri": result.payload["uri"], "digest": result.payload["digest"],
            })
    elif result.kind == "model":
        mid = task["model_id"]
        model = state.models.get(mid)
        if model is None or model["state"] != "generating":
            emit("Error", {"code": E_BAD_STATE, "message": f"model for {result.task_id} not generating"})
        else:
            emit("ModelReady", {
                "model_id": mid,
                "uri": result.payload["uri"], "digest": result.payload["digest"],
            })
    elif result.kind == "failed":
        emit("Error", {
            "code": E_BAD_STATE,
            "message": f"pipeline stage {result.payload.get('stage')} failed: {result.payload.get('reason')}",
        })
        emit("TaskFailed", {"task_id": result.task_id, "reason": result.payload.get("reason", "failed")})
    else:
        emit("Error", {"code": E_BAD_STATE, "message": f"unknown result kind {result.kind}"})
    return events, requests


# --- snapshot / digest / replay ----------------------------------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def logical_doc(state: SessionState) -> dict:
    """Digest-relevant state: everything except poses, event_seq and
    transport bookkeeping."""
    return {
        "session": state.config.session_name,
        "users": state.users,
        "instances": state.instances,
        "tasks": state.tasks,
        "cards": state.cards,
        "models": state.models,
        "counters": state.counters,
    }


def snapshot(state: SessionState) -> bytes:
    """Canonical serialization: stable field order, sorted keys."""
    return json.dumps(
        logical_doc(state), sort_keys=True, separators=(",", ":"), ensure_ascii=True
    ).encode("ascii")


def digest(state: SessionState) -> str:
    return f"{fnv1a64(snapshot(state)):016x}"


def restore(catalog: PartCatalog, config: SessionConfig, doc: dict, event_seq: int) -> SessionState:
    """Rebuild a state from a snapshot document (client join sync)."""
    state = SessionState(catalog=catalog, config=config)
    state.users = doc["users"]
    state.instances = doc["instances"]
    state.tasks = doc["tasks"]
    state.cards = doc["cards"]
    state.models = doc["models"]
    state.counters = doc["counters"]
    state.poses = {uid: {"x": 0.0, "y": 0.0, "yaw": 0.0} for uid in state.users}
    state.event_seq = event_seq
    return state


def replay(catalog: PartCatalog, config: SessionConfig, events) -> SessionState:
    """Fold an event sequence into a fresh session."""
    state = create_session(catalog, config)
    for ev in events:
        apply_event(state, ev)
    return state


def read_event_log(path: str) -> list[Event]:
    events = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(Event.from_json(line))
            except (json.JSONDecodeError, KeyError) as e:
                raise ReplayError(f"bad event at line {lineno}: {e}") from None
    return events


def write_event_log(path: str, events) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ev in events:
            f.write(ev.to_json() + "\n")
