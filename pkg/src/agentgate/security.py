"""Policy enforcement: role/scope authorization, agent-vs-human rate
limiting, intent verification, and consent management.

Everything denies by default: an empty policy grants no scopes, an absent
consent entry means not granted, and an AI caller without verified agent
claims is rejected outright. Decisions are values, not exceptions — the
gateway maps them to statuses.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from enum import Enum

from .protocol import AgentIdentity, AgentType
from .registry import IntentSpec


class DenialReason(Enum):
    MISSING_SCOPE = "MissingScope"
    INTENT_MISMATCH = "IntentMismatch"
    UNVERIFIED_AGENT = "UnverifiedAgent"


@dataclass(frozen=True)
class Denied:
    reason: DenialReason
    detail: str | None = None

    @property
    def allowed(self) -> bool:
        return False


@dataclass(frozen=True)
class Allowed:
    @property
    def allowed(self) -> bool:
        return True


ALLOWED = Allowed()


class UnknownCategory(Exception):
    def __init__(self, category: str, known: list[str]):
        self.category = category
        self.known = known
        super().__init__(f"unknown consent category {category!r}")


# ---------------------------------------------------------------------------
# Policy configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoleDefinition:
    name: str
    scopes: frozenset[str]


@dataclass(frozen=True)
class WindowLimit:
    limit: int
    window_seconds: int

    def __post_init__(self):
        if self.limit < 1 or self.window_seconds < 1:
            raise ValueError("limit and window_seconds must be >= 1")


@dataclass(frozen=True)
class RateLimitPolicy:
    ai: WindowLimit = WindowLimit(limit=60, window_seconds=60)
    human: WindowLimit = WindowLimit(limit=120, window_seconds=60)
    role_overrides: dict[str, WindowLimit] = field(default_factory=dict)

    def limit_for(self, agent_type: AgentType, role: str | None) -> WindowLimit:
        if role is not None and role in self.role_overrides:
            return self.role_overrides[role]
        return self.ai if agent_type is AgentType.AI else self.human


@dataclass(frozen=True)
class PolicyConfig:
    roles: dict[str, RoleDefinition] = field(default_factory=dict)
    rate_limits: RateLimitPolicy = field(default_factory=RateLimitPolicy)

    def scopes_for_role(self, role: str | None) -> frozenset[str]:
        if role is None:
            return frozenset()
        definition = self.roles.get(role)
        return definition.scopes if definition else frozenset()


def effective_scopes(identity: AgentIdentity, policy: PolicyConfig) -> frozenset[str]:
    """Verified token scopes plus whatever the policy grants the role.

    Without a verified token only the advisory role header contributes —
    which is empty unless the operator chose to define that role.
    """
    claims = identity.verified_claims
    if claims is not None:
        return claims.scopes | policy.scopes_for_role(claims.role)
    return policy.scopes_for_role(identity.role)


def authorize(identity: AgentIdentity, spec: IntentSpec, policy: PolicyConfig) -> Allowed | Denied:
    """RBAC + intent verification.

    Denies when an AI caller lacks verified agent claims, when the declared
    X-Agent-Intent disagrees with the resolved intent, or when the caller's
    scopes do not cover the intent's requirements.
    """
    if identity.agent_type is AgentType.AI:
        claims = identity.verified_claims
        if claims is None or not claims.is_agent:
            return Denied(DenialReason.UNVERIFIED_AGENT, "AI callers need verified agent claims")

    if identity.intent is not None and identity.intent != spec.name:
        return Denied(
            DenialReason.INTENT_MISMATCH,
            f"header declares {identity.intent!r} but request resolves to {spec.name!r}",
        )

    granted = effective_scopes(identity, policy)
    missing = sorted(spec.required_scopes - granted)
    if missing:
        return Denied(DenialReason.MISSING_SCOPE, missing[0])
    return ALLOWED


# ---------------------------------------------------------------------------
# Rate limiting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pass:
    limit: int
    remaining: int


@dataclass(frozen=True)
class Limited:
    limit: int
    retry_after_seconds: int


class RateLimiter:
    """Fixed-window counters keyed by (principal, agent type).

    The principal is the agent id when present, else the client address, so
    anonymous humans share an address budget while agents are individually
    accounted. AI and Human budgets never interact.
    """

    def __init__(self, policy: RateLimitPolicy):
        self._policy = policy
        self._windows: dict[tuple[str, str], tuple[int, int]] = {}  # key -> (window_start, count)
        self._lock = threading.Lock()

    def check(self, identity: AgentIdentity, client_address: str, now: float) -> Pass | Limited:
        principal = identity.agent_id or client_address
        window = self._policy.limit_for(identity.agent_type, identity.effective_role)
        key = (principal, identity.agent_type.value)
        window_start = int(now // window.window_seconds) * window.window_seconds
        with self._lock:
            start, count = self._windows.get(key, (window_start, 0))
            if start != window_start:
                start, count = window_start, 0
            if count >= window.limit:
                retry_after = max(1, math.ceil(start + window.window_seconds - now))
                return Limited(limit=window.limit, retry_after_seconds=retry_after)
            count += 1
            self._windows[key] = (start, count)
            return Pass(limit=window.limit, remaining=window.limit - count)

    def peek(self, identity: AgentIdentity, client_address: str, now: float) -> tuple[int, int]:
        """Current (limit, remaining) without consuming budget."""
        principal = identity.agent_id or client_address
        window = self._policy.limit_for(identity.agent_type, identity.effective_role)
        key = (principal, identity.agent_type.value)
        window_start = int(now // window.window_seconds) * window.window_seconds
        with self._lock:
            start, count = self._windows.get(key, (window_start, 0))
            if start != window_start:
                count = 0
        return window.limit, max(0, window.limit - count)


# ---------------------------------------------------------------------------
# Consent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConsentRecord:
    subject: str
    category: str
    granted: bool
    updated_at: float


@dataclass(frozen=True)
class ConsentDenied:
    missing: list[str]

    @property
    def allowed(self) -> bool:
        return False


class ConsentStore:
    """(subject, category) -> grant state; absent means not granted."""

    def __init__(self, known_categories: frozenset[str]):
        self._known = known_categories
        self._grants: dict[tuple[str, str], ConsentRecord] = {}
        self._lock = threading.Lock()

    def check(self, subject: str | None, categories: frozenset[str]) -> Allowed | ConsentDenied:
        """Allowed iff every category is granted; an empty set always passes."""
        if not categories:
            return ALLOWED
        with self._lock:
            missing = sorted(
                c
                for c in categories
                if subject is None or not self._grant_state(subject, c)
            )
        return ALLOWED if not missing else ConsentDenied(missing=missing)

    def _grant_state(self, subject: str, category: str) -> bool:
        record = self._grants.get((subject, category))
        return record.granted if record else False

    def update(self, subject: str, category: str, granted: bool, now: float) -> ConsentRecord:
        """Upsert a grant; effective for the next check. Categories must be
        declared by some registered intent."""
        if category not in self._known:
            raise UnknownCategory(category, sorted(self._known))
        record = ConsentRecord(subject=subject, category=category, granted=granted, updated_at=now)
        with self._lock:
            self._grants[(subject, category)] = record
        return record
