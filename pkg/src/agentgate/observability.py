"""Governance trail: structured audit records, anomaly detection, metrics.

Audit is write-ahead: a record is persisted to the sink before the gateway
releases the response. The sink is JSON lines; each line carries a "kind"
discriminator ("audit" or "alert") so alerts share the stream.

Anomaly rules are threshold-over-sliding-window. An alert fires when the
per-(rule, subject) event count inside the window reaches the threshold,
and is then deduplicated: nothing fires again for that pair until the
window has slid past the previous alert. Subject key is the agent id when
known, else the client address.
"""

from __future__ import annotations

import json
import threading
from collections import defaultdict, deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable


class Decision(Enum):
    OK = "Ok"
    DENIED_SCOPE = "DeniedScope"
    DENIED_CONSENT = "DeniedConsent"
    RATE_LIMITED = "RateLimited"
    INTENT_MISMATCH = "IntentMismatch"
    UPSTREAM_ERROR = "UpstreamError"
    # Outcomes the pipeline can produce beyond the core taxonomy; audit
    # completeness requires every request to map somewhere.
    UNAUTHENTICATED = "Unauthenticated"
    BAD_REQUEST = "BadRequest"
    UNKNOWN_INTENT = "UnknownIntent"
    MISSING_PARAM = "MissingParam"
    OVERLOADED = "Overloaded"
    INTERNAL_ERROR = "InternalError"


class CacheStatus(Enum):
    HIT = "Hit"
    MISS = "Miss"
    BYPASS = "Bypass"


class RuleKind(Enum):
    UNAUTHORIZED_BURST = "UnauthorizedBurst"
    EXCESSIVE_RETRIES = "ExcessiveRetries"
    RATE_LIMIT_STREAK = "RateLimitStreak"


# Which decisions each rule counts as an event.
RULE_EVENT_DECISIONS = {
    RuleKind.UNAUTHORIZED_BURST: frozenset(
        {Decision.DENIED_SCOPE, Decision.DENIED_CONSENT, Decision.INTENT_MISMATCH}
    ),
    RuleKind.EXCESSIVE_RETRIES: frozenset({Decision.UPSTREAM_ERROR}),
    RuleKind.RATE_LIMIT_STREAK: frozenset({Decision.RATE_LIMITED}),
}

DENIAL_DECISIONS = frozenset(
    {
        Decision.DENIED_SCOPE,
        Decision.DENIED_CONSENT,
        Decision.RATE_LIMITED,
        Decision.INTENT_MISMATCH,
    }
)
ERROR_DECISIONS = frozenset({Decision.UPSTREAM_ERROR, Decision.INTERNAL_ERROR})


class SinkUnavailable(Exception):
    """The append-only sink rejected a write."""


@dataclass
class AuditRecord:
    timestamp: float
    decision: Decision
    cache: CacheStatus = CacheStatus.BYPASS
    context_id: str | None = None
    agent_id: str | None = None
    agent_type: str | None = None
    role: str | None = None
    intent: str | None = None
    params_digest: str | None = None
    data_categories: frozenset[str] = frozenset()
    latency_ms: float = 0.0
    client_address: str | None = None
    sequence: int = 0

    @property
    def subject_key(self) -> str:
        return self.agent_id or self.client_address or "unknown"

    def to_json(self) -> str:
        doc = {
            "kind": "audit",
            "sequence": self.sequence,
            "timestamp": self.timestamp,
            "context_id": self.context_id,
            "agent_id": self.agent_id,
            "agent_type": self.agent_type,
            "role": self.role,
            "intent": self.intent,
            "params_digest": self.params_digest,
            "data_categories": sorted(self.data_categories),
            "decision": self.decision.value,
            "latency_ms": self.latency_ms,
            "cache": self.cache.value,
            "client_address": self.client_address,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "AuditRecord":
        doc = json.loads(line)
        if doc.get("kind") != "audit":
            raise ValueError(f"not an audit line: kind={doc.get('kind')!r}")
        return cls(
            timestamp=doc["timestamp"],
            decision=Decision(doc["decision"]),
            cache=CacheStatus(doc["cache"]),
            context_id=doc.get("context_id"),
            agent_id=doc.get("agent_id"),
            agent_type=doc.get("agent_type"),
            role=doc.get("role"),
            intent=doc.get("intent"),
            params_digest=doc.get("params_digest"),
            data_categories=frozenset(doc.get("data_categories", [])),
            latency_ms=doc.get("latency_ms", 0.0),
            client_address=doc.get("client_address"),
            sequence=doc.get("sequence", 0),
        )


@dataclass(frozen=True)
class AnomalyRule:
    kind: RuleKind
    threshold: int
    window_seconds: int

    def __post_init__(self):
        if self.threshold < 1 or self.window_seconds < 1:
            raise ValueError("threshold and window_seconds must be >= 1")


DEFAULT_RULES = (
    AnomalyRule(RuleKind.UNAUTHORIZED_BURST, threshold=3, window_seconds=60),
    AnomalyRule(RuleKind.EXCESSIVE_RETRIES, threshold=5, window_seconds=60),
    AnomalyRule(RuleKind.RATE_LIMIT_STREAK, threshold=10, window_seconds=60),
)


@dataclass(frozen=True)
class AnomalyAlert:
    rule: RuleKind
    subject: str
    window_start: float
    observed: int
    triggered_at: float

    def to_json(self) -> str:
        doc = {
            "kind": "alert",
            "rule": self.rule.value,
            "subject": self.subject,
            "window_start": self.window_start,
            "observed": self.observed,
            "triggered_at": self.triggered_at,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Sinks and the audit log
# ---------------------------------------------------------------------------


class MemorySink:
    def __init__(self):
        self.lines: list[str] = []

    def append(self, line: str) -> None:
        self.lines.append(line)


class JsonlSink:
    """Append-only JSON-lines file; write failures become SinkUnavailable."""

    def __init__(self, path: str | Path):
        self._path = Path(path)

    def append(self, line: str) -> None:
        try:
            with self._path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        except OSError as exc:
            raise SinkUnavailable(str(exc)) from exc


class AuditLog:
    """Append-only, totally ordered by (timestamp, sequence)."""

    def __init__(self, sink=None):
        self._sink = sink if sink is not None else MemorySink()
        self._records: list[AuditRecord] = []
        self._sequence = 0
        self._lock = threading.Lock()

    def append(self, record: AuditRecord) -> int:
        """Persist before returning (write-ahead); returns the sequence."""
        with self._lock:
            self._sequence += 1
            record.sequence = self._sequence
            self._sink.append(record.to_json())
            self._records.append(record)
            return record.sequence

    def append_alert(self, alert: AnomalyAlert) -> None:
        with self._lock:
            self._sink.append(alert.to_json())

    def records(self) -> list[AuditRecord]:
        with self._lock:
            return list(self._records)


# ---------------------------------------------------------------------------
# Anomaly detection
# ---------------------------------------------------------------------------


class AnomalyDetector:
    """Sliding-window event counter per (rule, subject) with dedup.

    The window at event time t covers (t - window_seconds, t]. An alert
    fires when the count reaches the threshold and the previous alert for
    the same (rule, subject) is at or before t - window_seconds.
    """

    def __init__(self, rules: tuple[AnomalyRule, ...] = DEFAULT_RULES, on_alert: Callable | None = None):
        self._rules = rules
        self._events: dict[tuple[RuleKind, str], deque[float]] = defaultdict(deque)
        self._last_alert: dict[tuple[RuleKind, str], float] = {}
        self._lock = threading.Lock()
        self._alerts: list[AnomalyAlert] = []
        self._on_alert = on_alert

    def detect(self, record: AuditRecord, now: float) -> list[AnomalyAlert]:
        alerts: list[AnomalyAlert] = []
        subject = record.subject_key
        with self._lock:
            for rule in self._rules:
                if record.decision not in RULE_EVENT_DECISIONS[rule.kind]:
                    continue
                key = (rule.kind, subject)
                events = self._events[key]
                events.append(now)
                horizon = now - rule.window_seconds
                while events and events[0] <= horizon:
                    events.popleft()
                last = self._last_alert.get(key)
                if len(events) >= rule.threshold and (last is None or last <= horizon):
                    alert = AnomalyAlert(
                        rule=rule.kind,
                        subject=subject,
                        window_start=events[0],
                        observed=len(events),
                        triggered_at=now,
                    )
                    self._last_alert[key] = now
                    self._alerts.append(alert)
                    alerts.append(alert)
        for alert in alerts:
            if self._on_alert is not None:
                self._on_alert(alert)
        return alerts

    def alerts(self) -> list[AnomalyAlert]:
        with self._lock:
            return list(self._alerts)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class _IntentCounters:
    attempts: int = 0
    successes: int = 0
    denials: int = 0
    errors: int = 0
    cache_hits: int = 0


class MetricsCounters:
    """Per-intent counters; snapshots are consistent point-in-time views."""

    def __init__(self):
        self._intents: dict[str, _IntentCounters] = defaultdict(_IntentCounters)
        self._lock = threading.Lock()

    def observe(self, record: AuditRecord) -> None:
        if record.intent is None:
            return
        with self._lock:
            counters = self._intents[record.intent]
            counters.attempts += 1
            if record.decision is Decision.OK:
                counters.successes += 1
            elif record.decision in DENIAL_DECISIONS:
                counters.denials += 1
            elif record.decision in ERROR_DECISIONS:
                counters.errors += 1
            if record.cache is CacheStatus.HIT:
                counters.cache_hits += 1

    def snapshot(self) -> dict:
        with self._lock:
            intents = {}
            totals = _IntentCounters()
            for name in sorted(self._intents):
                c = self._intents[name]
                intents[name] = {
                    "attempts": c.attempts,
                    "successes": c.successes,
                    "denials": c.denials,
                    "errors": c.errors,
                    "cache_hits": c.cache_hits,
                    "success_rate": c.successes / c.attempts if c.attempts else 0.0,
                    "error_frequency": c.errors / c.attempts if c.attempts else 0.0,
                }
                totals.attempts += c.attempts
                totals.successes += c.successes
                totals.denials += c.denials
                totals.errors += c.errors
                totals.cache_hits += c.cache_hits
        return {
            "intents": intents,
            "totals": {
                "attempts": totals.attempts,
                "successes": totals.successes,
                "denials": totals.denials,
                "errors": totals.errors,
                "cache_hits": totals.cache_hits,
                "success_rate": totals.successes / totals.attempts if totals.attempts else 0.0,
                "error_frequency": totals.errors / totals.attempts if totals.attempts else 0.0,
            },
        }
