"""hanzibench: collaborative Hanzi-assembly engine.

Part catalog with equivalence classes and a recipe table, a deterministic
multi-user session state machine, an LLM/image/3D generation pipeline with
mock backends, a WebSocket session server with LAN discovery, and a CLI.
"""

from .catalog import (
    PartCatalog, Part, load_catalog, load_catalog_file,
    canonicalize, splice, verify_assembly, assembly_plan,
    CatalogError, ParseError, ValidationError, UnknownPart, UnknownCharacter,
)
from .engine import (
    Command, Event, SessionConfig, SessionState, PipelineRequest, PipelineResult,
    create_session, handle_command, ingest_pipeline_result,
    snapshot, digest, replay, apply_event, restore, ReplayError,
)
from .loop import SessionLoop

__all__ = [
    "PartCatalog", "Part", "load_catalog", "load_catalog_file",
    "canonicalize", "splice", "verify_assembly", "assembly_plan",
    "CatalogError", "ParseError", "ValidationError", "UnknownPart", "UnknownCharacter",
    "Command", "Event", "SessionConfig", "SessionState",
    "PipelineRequest", "PipelineResult",
    "create_session", "handle_command", "ingest_pipeline_result",
    "snapshot", "digest", "replay", "apply_event", "restore", "ReplayError",
    "SessionLoop",
]
