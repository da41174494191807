"""Injectable clocks.

Every component that reads time or sleeps takes a Clock so that timing
behaviour (cache TTLs, rate windows, scheduler aging, retry backoff) is
deterministic under test. VirtualClock.sleep advances virtual time instead
of blocking, which makes retry/backoff tests instant.
"""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    """Wall clock; the production default."""

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class VirtualClock:
    """Manually driven clock for deterministic tests.

    sleep() advances time atomically; advance()/set_time() drive simulations.
    Intended for a single driving thread — concurrent sleepers all move the
    same timeline.
    """

    def __init__(self, start: float = 1_700_000_000.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        self.advance(seconds)

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("cannot advance backwards")
        with self._lock:
            self._now += seconds
            return self._now

    def set_time(self, now: float) -> None:
        with self._lock:
            self._now = float(now)
