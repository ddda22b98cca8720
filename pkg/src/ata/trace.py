"""Append-only run trace: one JSON document per line.

Required fields on every record: ts, run_id, iteration, agent, kind,
correlation_id, rationale. A payload summary rides along when useful. The
trace is an audit surface, so a sink that stops accepting writes aborts the
run rather than silently dropping events.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import OperationalError, ValidationError


@dataclass(frozen=True, slots=True)
class TraceEvent:
    run_id: str
    iteration: int
    agent: str
    kind: str
    correlation_id: str
    rationale: str
    payload: Mapping[str, Any] = field(default_factory=dict)
    ts: float | None = None

    def __post_init__(self) -> None:
        if not self.kind:
            raise ValidationError("trace kind must be non-empty")
        if not self.rationale:
            raise ValidationError("trace rationale must be non-empty")

    def to_line(self) -> str:
        doc = {
            "ts": self.ts if self.ts is not None else time.time(),
            "run_id": self.run_id,
            "iteration": self.iteration,
            "agent": self.agent,
            "kind": self.kind,
            "correlation_id": self.correlation_id,
            "rationale": self.rationale,
            "payload": dict(self.payload),
        }
        return json.dumps(doc, sort_keys=True)


class FileTraceSink:
    def __init__(self, path: Path | str):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8"):
                pass
        except OSError as exc:
            raise OperationalError(f"trace sink {self.path} is not writable: {exc}") from exc

    def emit(self, event: TraceEvent) -> None:
        try:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(event.to_line() + "\n")
        except OSError as exc:
            raise OperationalError(f"trace sink {self.path} failed: {exc}") from exc


class ListTraceSink:
    """Collects events in memory. Used by simulations and tests."""

    def __init__(self):
        self.events: list[TraceEvent] = []

    def emit(self, event: TraceEvent) -> None:
        self.events.append(event)


def emit_trace_event(sink, event: TraceEvent) -> None:
    """Append one event. OperationalError propagates; the loop must abort."""
    sink.emit(event)


def read_trace(path: Path | str) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def trace_iteration_count(records: list[dict]) -> int:
    """Reconstruct how many iterations a run executed from its trace alone."""
    return sum(1 for r in records if r.get("kind") == "iteration-end")
