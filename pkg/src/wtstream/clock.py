"""Injectable clocks so every time-based path can run without sleeping."""
from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone

from .timeutil import utc


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class ManualClock:
    """A clock that only moves when told to. Never runs backwards."""

    def __init__(self, start: datetime | None = None):
        self._now = utc(start) if start is not None else datetime(2000, 1, 1, tzinfo=timezone.utc)
        self._lock = threading.Lock()

    def now(self) -> datetime:
        return self._now

    def set(self, when: datetime) -> datetime:
        when = utc(when)
        with self._lock:
            if when > self._now:
                self._now = when
            return self._now

    def advance(self, delta: timedelta) -> datetime:
        return self.set(self._now + delta)
