"""Injectable time source so scenario runs are reproducible."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class SimClock:
    """Deterministic clock advanced explicitly by a scenario driver."""

    def __init__(self, start: datetime, step_seconds: float = 1.0) -> None:
        if start.tzinfo is None:
            raise ValueError("SimClock start must be timezone-aware")
        self.start = start.astimezone(timezone.utc)
        self.step_seconds = step_seconds
        self._current = self.start

    def now(self) -> datetime:
        return self._current

    def advance_to_tick(self, tick: int) -> datetime:
        self._current = self.start + timedelta(seconds=tick * self.step_seconds)
        return self._current
