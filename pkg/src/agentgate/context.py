"""Session context middleware: per-context history and parameter back-fill.

Endpoints stay stateless; the store remembers interaction history and
previously supplied parameters per context id and back-fills missing
required params before a request is planned. Denied interactions never
update remembered parameters, so a rejected request cannot poison session
memory.

Operations on the same context id are serialized; distinct ids proceed in
parallel. Snapshots are JSON lines, one session object per line (schema in
schemas/session_snapshot.schema.json).
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import aql
from .clock import Clock, SystemClock
from .protocol import ResponseMetadata
from .registry import IntentSpec

DEFAULT_HISTORY_BOUND = 50


class Outcome(Enum):
    OK = "Ok"
    DENIED = "Denied"
    ERROR = "Error"


class MissingParam(Exception):
    """Required params unresolved after back-fill; names in spec order."""

    def __init__(self, names: list[str]):
        self.names = names
        super().__init__(f"missing required params: {', '.join(names)}")


@dataclass(frozen=True)
class InteractionRecord:
    timestamp: float
    intent: str
    params_digest: str
    outcome: Outcome
    data_last_updated: str | None = None


@dataclass
class SessionContext:
    context_id: str
    history: deque = field(default_factory=lambda: deque(maxlen=DEFAULT_HISTORY_BOUND))
    remembered_params: dict[str, aql.Scalar] = field(default_factory=dict)
    created_at: float = 0.0
    last_touched: float = 0.0


class SessionStore:
    """In-memory store keyed by context id, with TTL eviction and snapshots."""

    def __init__(self, clock: Clock | None = None, history_bound: int = DEFAULT_HISTORY_BOUND):
        self._clock = clock or SystemClock()
        self._history_bound = history_bound
        self._sessions: dict[str, SessionContext] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._mu = threading.Lock()

    def lock_for(self, context_id: str) -> threading.Lock:
        """Per-context lock; callers hold it across restore/record pairs."""
        with self._mu:
            lock = self._locks.get(context_id)
            if lock is None:
                lock = self._locks[context_id] = threading.Lock()
            return lock

    def restore(self, context_id: str) -> SessionContext:
        """Return the existing session or lazily create an empty one."""
        if not context_id:
            raise ValueError("context_id must be non-empty")
        now = self._clock.now()
        with self._mu:
            session = self._sessions.get(context_id)
            if session is None:
                session = SessionContext(
                    context_id=context_id,
                    history=deque(maxlen=self._history_bound),
                    created_at=now,
                    last_touched=now,
                )
                self._sessions[context_id] = session
            else:
                session.last_touched = now
            return session

    def evict_expired(self, now: float, ttl_seconds: float) -> int:
        """Drop sessions with last_touched + ttl <= now (boundary inclusive)."""
        if ttl_seconds <= 0:
            raise ValueError("ttl_seconds must be positive")
        with self._mu:
            stale = [cid for cid, s in self._sessions.items() if s.last_touched + ttl_seconds <= now]
            for cid in stale:
                del self._sessions[cid]
                self._locks.pop(cid, None)
            return len(stale)

    def __len__(self) -> int:
        with self._mu:
            return len(self._sessions)

    # -- snapshot persistence -------------------------------------------------

    def save_snapshot(self, path: str | Path) -> int:
        with self._mu:
            sessions = list(self._sessions.values())
        lines = []
        for s in sessions:
            lines.append(
                json.dumps(
                    {
                        "context_id": s.context_id,
                        "created_at": s.created_at,
                        "last_touched": s.last_touched,
                        "remembered_params": s.remembered_params,
                        "history": [
                            {
                                "timestamp": r.timestamp,
                                "intent": r.intent,
                                "params_digest": r.params_digest,
                                "outcome": r.outcome.value,
                                "data_last_updated": r.data_last_updated,
                            }
                            for r in s.history
                        ],
                    },
                    sort_keys=True,
                )
            )
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        return len(lines)

    def load_snapshot(self, path: str | Path) -> int:
        count = 0
        with self._mu:
            for line in Path(path).read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                doc = json.loads(line)
                session = SessionContext(
                    context_id=doc["context_id"],
                    history=deque(
                        (
                            InteractionRecord(
                                timestamp=r["timestamp"],
                                intent=r["intent"],
                                params_digest=r["params_digest"],
                                outcome=Outcome(r["outcome"]),
                                data_last_updated=r.get("data_last_updated"),
                            )
                            for r in doc["history"]
                        ),
                        maxlen=self._history_bound,
                    ),
                    remembered_params=dict(doc["remembered_params"]),
                    created_at=doc["created_at"],
                    last_touched=doc["last_touched"],
                )
                self._sessions[session.context_id] = session
                count += 1
        return count


def backfill(session: SessionContext, query: aql.AqlQuery, spec: IntentSpec) -> aql.AqlQuery:
    """Fill required params absent from the query out of session memory.

    Explicitly supplied args always win over remembered values. Params still
    unresolved raise MissingParam naming all of them. Never introduces a
    param the intent does not declare.
    """
    if query.intent != spec.name:
        raise ValueError(f"query intent {query.intent!r} does not match spec {spec.name!r}")
    supplied = {name for name, _ in query.args}
    added: list[tuple[str, aql.Scalar]] = []
    missing: list[str] = []
    for param in spec.required_params():
        if param.name in supplied:
            continue
        if param.name in session.remembered_params:
            added.append((param.name, session.remembered_params[param.name]))
        else:
            missing.append(param.name)
    if missing:
        raise MissingParam(missing)
    if not added:
        return query
    return aql.AqlQuery(intent=query.intent, args=query.args + tuple(added), selection=query.selection)


def record(
    session: SessionContext,
    query: aql.AqlQuery,
    spec: IntentSpec,
    outcome: Outcome,
    meta: ResponseMetadata,
    now: float,
) -> None:
    """Append an interaction record and merge args into session memory.

    The history deque evicts its oldest entry past the bound. Denied
    interactions are recorded but never update remembered_params.
    """
    session.history.append(
        InteractionRecord(
            timestamp=now,
            intent=spec.name,
            params_digest=aql.args_digest(query.args),
            outcome=outcome,
            data_last_updated=meta.data_last_updated,
        )
    )
    session.last_touched = max(session.last_touched, now)
    if outcome is not Outcome.DENIED:
        for name, value in query.args:
            session.remembered_params[name] = value
