"""Append-only audit trail for stage changes, policy edits, and admin actions."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable

from .protocol import render_instant


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    at: datetime
    kind: str
    actor: str
    cause: str
    details: dict[str, Any] = field(default_factory=dict)
    before: dict[str, Any] | None = None
    after: dict[str, Any] | None = None
    tick: int | None = None

    def to_json_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "seq": self.seq,
            "at": render_instant(self.at),
            "kind": self.kind,
            "actor": self.actor,
            "cause": self.cause,
            "details": self.details,
        }
        if self.before is not None:
            out["before"] = self.before
        if self.after is not None:
            out["after"] = self.after
        if self.tick is not None:
            out["tick"] = self.tick
        return out


class AuditLog:
    """Totally ordered audit sink; optionally mirrored to a JSONL file.

    `tick_provider`, when set, stamps entries with the driver's logical time
    (e.g. the scenario request ordinal) in addition to the wall clock.
    """

    def __init__(self, clock, persist_path: Path | None = None) -> None:
        self._clock = clock
        self._entries: list[AuditEntry] = []
        self._lock = threading.Lock()
        self._path = Path(persist_path) if persist_path else None
        self.tick_provider: Callable[[], int] | None = None

    def append(
        self,
        kind: str,
        actor: str,
        cause: str,
        details: dict[str, Any] | None = None,
        before: dict[str, Any] | None = None,
        after: dict[str, Any] | None = None,
    ) -> AuditEntry:
        with self._lock:
            entry = AuditEntry(
                seq=len(self._entries) + 1,
                at=self._clock.now(),
                kind=kind,
                actor=actor,
                cause=cause,
                details=dict(details or {}),
                before=before,
                after=after,
                tick=self.tick_provider() if self.tick_provider else None,
            )
            self._entries.append(entry)
            if self._path:
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.to_json_dict(), separators=(",", ":")) + "\n")
            return entry

    def entries(self, kind: str | None = None) -> list[AuditEntry]:
        with self._lock:
            snapshot = list(self._entries)
        if kind is None:
            return snapshot
        return [e for e in snapshot if e.kind == kind]

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)
