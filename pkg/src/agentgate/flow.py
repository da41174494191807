"""Performance tier: context-aware response cache, priority scheduling
with aging, and upstream retry policy.

The cache is LRU-bounded and keyed by the full logical request identity
(intent, canonical args, canonical selection, role, and context id for
context-sensitive intents), so a different field selection is a different
entry. Mutations never enter the cache; they invalidate by resource tag.

The scheduler dequeues by effective priority: class level minus one per
elapsed aging interval, floored at zero, ties FIFO by sequence. Linear aging
guarantees a waiting job eventually competes at Interactive level, so no
class can be starved. Workers are optional — with workers=0 the scheduler is
driven manually (run_pending_once), which is how the deterministic
virtual-clock simulations run.

All timing goes through the injected Clock.
"""

from __future__ import annotations

import threading
from collections import OrderedDict, deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Callable

from . import aql
from .clock import Clock, SystemClock
from .protocol import ResponseMetadata
from .registry import IntentSpec, PriorityClass

DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_BASE_BACKOFF_MS = 100
DEFAULT_BACKOFF_MULTIPLIER = 2


# ---------------------------------------------------------------------------
# Upstream failure taxonomy (shared with the upstream clients)
# ---------------------------------------------------------------------------


class UpstreamFailure(Exception):
    retry_after_seconds: int | None = None

    @property
    def transient(self) -> bool:
        return True


class UpstreamTimeout(UpstreamFailure):
    def __init__(self, message: str = "upstream timed out", retry_after_seconds: int | None = None):
        super().__init__(message)
        self.retry_after_seconds = retry_after_seconds


class UpstreamHTTPError(UpstreamFailure):
    def __init__(self, status: int, message: str = "", retry_after_seconds: int | None = None):
        super().__init__(message or f"upstream returned {status}")
        self.status = status
        self.retry_after_seconds = retry_after_seconds

    @property
    def transient(self) -> bool:
        return self.status >= 500


class ExhaustedRetries(Exception):
    def __init__(self, attempts: int, last: UpstreamFailure):
        self.attempts = attempts
        self.last = last
        super().__init__(f"gave up after {attempts} attempts: {last}")


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CacheKey:
    intent: str
    params_digest: str
    selection_digest: str
    role: str | None = None
    context_id: str | None = None


@dataclass(frozen=True)
class CacheEntry:
    body: bytes
    meta: ResponseMetadata
    stored_at: float
    ttl_seconds: int
    tags: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.ttl_seconds <= 0:
            raise ValueError("uncacheable entries must not be constructed")


def make_cache_key(
    spec: IntentSpec, query: aql.AqlQuery, role: str | None, context_id: str | None
) -> CacheKey:
    """Deterministic identity of a logical request for cache purposes."""
    return CacheKey(
        intent=spec.name,
        params_digest=aql.args_digest(query.args),
        selection_digest=aql.selection_digest(query.selection),
        role=role,
        context_id=context_id if spec.context_sensitive else None,
    )


class ResponseCache:
    """Thread-safe LRU cache with TTL expiry and tag-based invalidation."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self._capacity = capacity
        self._entries: OrderedDict[CacheKey, CacheEntry] = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def get(self, key: CacheKey, now: float) -> CacheEntry | None:
        """Hit iff present and stored_at + ttl > now; expired entries are
        dropped on access."""
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                return None
            if entry.stored_at + entry.ttl_seconds <= now:
                del self._entries[key]
                return None
            self._entries.move_to_end(key)
            return entry

    def put(self, key: CacheKey, entry: CacheEntry) -> None:
        with self._lock:
            if key in self._entries:
                del self._entries[key]
            self._entries[key] = entry
            while len(self._entries) > self._capacity:
                self._entries.popitem(last=False)

    def invalidate_tags(self, tags: set[str] | frozenset[str]) -> int:
        """Remove every entry whose tag set intersects tags; returns count."""
        if not tags:
            return 0
        with self._lock:
            doomed = [k for k, e in self._entries.items() if e.tags & tags]
            for k in doomed:
                del self._entries[k]
            return len(doomed)


# ---------------------------------------------------------------------------
# Scheduler
# ---------------------------------------------------------------------------


class QueueFull(Exception):
    def __init__(self, retry_after_seconds: int = 1):
        self.retry_after_seconds = retry_after_seconds
        super().__init__("scheduler queue is full")


@dataclass
class ScheduledJob:
    priority_level: int
    enqueued_at: float
    sequence: int
    work: Callable[[], object] | None = None
    future: Future = field(default_factory=Future)
    grant: threading.Event = field(default_factory=threading.Event)


class SchedulerClosed(Exception):
    pass


class PriorityScheduler:
    """Bounded priority queue with linear aging over a fixed pool of
    concurrency slots.

    Effective priority of a queued job at time t:
        max(0, level - floor((t - enqueued_at) / aging_interval))
    Grants go to the lowest effective priority, ties broken FIFO by
    sequence. Within one class the head of its FIFO always dominates, so
    selection only compares the three class heads.

    Two drive modes:
      - workers >= 1: run_sync() executes the work on the calling thread
        once a slot is granted (caller-runs pool: at most `workers`
        executions in flight; contended callers park on per-job events and
        a completing job hands its slot to the best-queued one).
      - workers == 0: manual mode for deterministic simulations — submit()
        parks jobs, run_pending_once() dequeues and runs the best one at
        the current clock time.
    """

    def __init__(
        self,
        capacity: int = 64,
        workers: int = 0,
        aging_interval_ms: int = 1000,
        clock: Clock | None = None,
    ):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if aging_interval_ms <= 0:
            raise ValueError("aging_interval_ms must be positive")
        self._capacity = capacity
        self._workers = workers
        self._aging_seconds = aging_interval_ms / 1000.0
        self._clock = clock or SystemClock()
        self._queues: dict[int, deque[ScheduledJob]] = {0: deque(), 1: deque(), 2: deque()}
        self._size = 0
        self._active = 0
        self._sequence = 0
        self._lock = threading.Lock()
        self._closed = False

    @property
    def queued(self) -> int:
        with self._lock:
            return self._size

    def _enqueue(self, work, priority: PriorityClass) -> ScheduledJob:
        if self._size >= self._capacity:
            raise QueueFull(retry_after_seconds=max(1, round(self._aging_seconds)))
        self._sequence += 1
        job = ScheduledJob(
            priority_level=priority.level,
            enqueued_at=self._clock.now(),
            sequence=self._sequence,
            work=work,
        )
        self._queues[job.priority_level].append(job)
        self._size += 1
        return job

    def submit(self, work: Callable[[], object], priority: PriorityClass) -> Future:
        """Park work for manual dequeue; QueueFull at capacity."""
        with self._lock:
            return self._enqueue(work, priority).future

    def effective_priority(self, job: ScheduledJob, now: float) -> int:
        aged = int((now - job.enqueued_at) / self._aging_seconds)
        return max(0, job.priority_level - aged)

    def _select(self, now: float) -> ScheduledJob | None:
        best: ScheduledJob | None = None
        best_key: tuple[int, int] | None = None
        for level in (0, 1, 2):
            queue = self._queues[level]
            if not queue:
                continue
            head = queue[0]
            key = (self.effective_priority(head, now), head.sequence)
            if best_key is None or key < best_key:
                best, best_key = head, key
        if best is not None:
            self._queues[best.priority_level].popleft()
            self._size -= 1
        return best

    def run_pending_once(self) -> bool:
        """Dequeue and run the best job at the current clock time.

        Manual drive for workerless schedulers; returns False when idle.
        """
        with self._lock:
            job = self._select(self._clock.now())
        if job is None:
            return False
        if not job.future.set_running_or_notify_cancel():
            return True
        try:
            job.future.set_result(job.work())
        except BaseException as exc:  # noqa: BLE001 — failure travels via the future
            job.future.set_exception(exc)
        return True

    def run_sync(self, work: Callable[[], object], priority: PriorityClass):
        """Execute work on this thread once the scheduler grants a slot.

        Immediate when a slot is free and nothing is queued; otherwise this
        caller parks until a completing job hands its slot over in
        effective-priority order. Exceptions propagate to the caller.
        """
        if self._workers < 1:
            raise RuntimeError("run_sync needs a scheduler with at least one slot")
        with self._lock:
            if self._closed:
                raise SchedulerClosed("scheduler is shut down")
            if self._active < self._workers and self._size == 0:
                self._active += 1
                job = None
            else:
                job = self._enqueue(None, priority)
        if job is not None:
            job.grant.wait()
            if self._closed:
                raise SchedulerClosed("scheduler is shut down")
        try:
            return work()
        finally:
            with self._lock:
                nxt = self._select(self._clock.now())
                if nxt is not None:
                    nxt.grant.set()  # slot transfers directly to the next job
                else:
                    self._active -= 1

    def shutdown(self, wait: bool = True) -> None:
        """Stop granting slots and wake every parked caller."""
        with self._lock:
            self._closed = True
            for queue in self._queues.values():
                while queue:
                    self._size -= 1
                    queue.popleft().grant.set()


# ---------------------------------------------------------------------------
# Retry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    base_backoff_ms: int = DEFAULT_BASE_BACKOFF_MS
    multiplier: int = DEFAULT_BACKOFF_MULTIPLIER
    honor_retry_after: bool = True

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_backoff_ms <= 0:
            raise ValueError("base_backoff_ms must be positive")

    def backoff_seconds(self, attempt: int) -> float:
        """Sleep before attempt N+1 after attempt N failed (attempt is 1-based)."""
        return (self.base_backoff_ms * self.multiplier ** (attempt - 1)) / 1000.0


def with_retry(policy: RetryPolicy, call: Callable[[], object], clock: Clock | None = None):
    """Run an idempotent upstream call under the retry policy.

    Transient failures (timeouts, 5xx) are retried up to max_attempts with
    exponential backoff, overridden by the upstream's retry-after hint when
    the policy honors it. Non-transient failures propagate immediately.
    Mutations must never be passed here — caller contract.
    """
    clock = clock or SystemClock()
    last: UpstreamFailure | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return call()
        except UpstreamFailure as failure:
            if not failure.transient:
                raise
            last = failure
            if attempt == policy.max_attempts:
                break
            delay = policy.backoff_seconds(attempt)
            if policy.honor_retry_after and failure.retry_after_seconds is not None:
                delay = float(failure.retry_after_seconds)
            clock.sleep(delay)
    assert last is not None
    raise ExhaustedRetries(attempts=policy.max_attempts, last=last)
