"""Single choke point gluing the session engine to the pipeline runner.

Commands and pipeline results are applied strictly sequentially; the event
log accumulated here is the session's authoritative history.
"""

from __future__ import annotations

from typing import Callable, Optional

from .catalog import PartCatalog
from .engine import (
    Command, Event, PipelineResult, SessionConfig, SessionState,
    create_session, digest, handle_command, ingest_pipeline_result, snapshot,
)
from .pipeline import PipelineConfig, PipelineRunner


class SessionLoop:
    def __init__(self, catalog: PartCatalog, config: SessionConfig,
                 pipeline_config: Optional[PipelineConfig] = None,
                 runner: Optional[PipelineRunner] = None):
        self.catalog = catalog
        self.config = config
        self.state: SessionState = create_session(catalog, config)
        self.runner = runner or PipelineRunner(catalog, pipeline_config)
        self.log: list[Event] = []
        self.listeners: list[Callable[[Event], None]] = []

    def command(self, cmd: Command) -> list[Event]:
        events, requests = handle_command(self.state, cmd)
        self._record(events)
        for req in requests:
            self.runner.submit(req)
        return events

    def ingest(self, result: PipelineResult) -> list[Event]:
        events, requests = ingest_pipeline_result(self.state, result)
        self._record(events)
        for req in requests:
            self.runner.submit(req)
        return events

    def tick(self) -> list[Event]:
        """Advance pipeline jobs one round and ingest anything that finished."""
        self.runner.tick()
        events: list[Event] = []
        # ingesting may submit follow-up jobs; drain until quiet this round
        results = self.runner.drain_results()
        while results:
            for result in results:
                events.extend(self.ingest(result))
            results = self.runner.drain_results()
        return events

    def run_pipeline_to_completion(self, max_ticks: int = 100) -> list[Event]:
        events = []
        for _ in range(max_ticks):
            if all(j.state in ("complete", "failed") for j in self.runner.jobs.values()):
                break
            events.extend(self.tick())
        return events

    def digest(self) -> str:
        return digest(self.state)

    def snapshot(self) -> bytes:
        return snapshot(self.state)

    def summary(self) -> dict:
        counts: dict[str, int] = {}
        for ev in self.log:
            counts[ev.type] = counts.get(ev.type, 0) + 1
        return {
            "events": len(self.log),
            "cards_minted": counts.get("VerificationSucceeded", 0),
            "cards_spent": counts.get("CardSpent", 0),
            "models_activated": counts.get("ModelActivated", 0),
            "splices_ok": counts.get("SpliceSucceeded", 0),
            "splices_rejected": counts.get("SpliceRejected", 0),
            "verifications_failed": counts.get("VerificationFailed", 0),
            "errors": counts.get("Error", 0),
            "digest": self.digest(),
        }

    def _record(self, events: list[Event]) -> None:
        self.log.extend(events)
        for ev in events:
            for listener in self.listeners:
                listener(ev)
