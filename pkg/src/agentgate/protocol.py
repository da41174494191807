"""Agent header protocol, claim tokens, and the response metadata envelope.

Wire contract:
  request headers   X-Agent-Type, X-Agent-Intent, X-Agent-Role, X-Agent-Id,
                    X-Context-Id (all optional; names case-insensitive)
  response headers  X-Data-LastUpdated (RFC 3339 UTC), X-RateLimit-Limit,
                    X-RateLimit-Remaining, X-Error-Recovery ("RetryAfter=<n>s")
  claim token       base64url(claim doc) "." base64url(HMAC-SHA256(seg1, key))
                    — segments unpadded; claim doc is JSON with sorted keys and
                    no whitespace, so encoding is deterministic.

Everything here is pure and stateless; authentication state (verified_claims)
is attached by the caller after verify_claim_token succeeds.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import re
from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

INTENT_TOKEN_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")
SCOPE_RE = re.compile(r"^[a-z][a-z0-9_-]*:[a-z][a-z0-9_-]*$")
_RETRY_AFTER_RE = re.compile(r"^RetryAfter=(\d+)s$")

AGENT_TYPE_HEADER = "X-Agent-Type"
AGENT_INTENT_HEADER = "X-Agent-Intent"
AGENT_ROLE_HEADER = "X-Agent-Role"
AGENT_ID_HEADER = "X-Agent-Id"
CONTEXT_ID_HEADER = "X-Context-Id"
DATA_LAST_UPDATED_HEADER = "X-Data-LastUpdated"
RATE_LIMIT_LIMIT_HEADER = "X-RateLimit-Limit"
RATE_LIMIT_REMAINING_HEADER = "X-RateLimit-Remaining"
ERROR_RECOVERY_HEADER = "X-Error-Recovery"

_RECOGNIZED_REQUEST_HEADERS = {
    AGENT_TYPE_HEADER.lower(): "agent_type",
    AGENT_INTENT_HEADER.lower(): "intent",
    AGENT_ROLE_HEADER.lower(): "role",
    AGENT_ID_HEADER.lower(): "agent_id",
    CONTEXT_ID_HEADER.lower(): "context_id",
}

# Served verbatim by the discovery document's "headers" section.
HEADER_CATALOG = [
    {"name": AGENT_TYPE_HEADER, "direction": "request",
     "description": "Caller kind: 'AI' or 'human'. Absent means human."},
    {"name": AGENT_INTENT_HEADER, "direction": "request",
     "description": "Declared intent name; must match the resolved intent."},
    {"name": AGENT_ROLE_HEADER, "direction": "request",
     "description": "Advisory role name; verified claims take precedence."},
    {"name": AGENT_ID_HEADER, "direction": "request",
     "description": "Stable caller identifier used for rate limiting and audit."},
    {"name": CONTEXT_ID_HEADER, "direction": "request",
     "description": "Opaque session key enabling history and parameter back-fill."},
    {"name": "Authorization", "direction": "request",
     "description": "Claim token (optionally 'Bearer '-prefixed); required for AI callers."},
    {"name": DATA_LAST_UPDATED_HEADER, "direction": "response",
     "description": "RFC 3339 UTC freshness of the returned data (oldest across plan steps)."},
    {"name": RATE_LIMIT_LIMIT_HEADER, "direction": "response",
     "description": "Request budget for the caller's window."},
    {"name": RATE_LIMIT_REMAINING_HEADER, "direction": "response",
     "description": "Requests left in the current window."},
    {"name": ERROR_RECOVERY_HEADER, "direction": "response",
     "description": "Retry guidance on retryable failures: 'RetryAfter=<seconds>s'."},
]


class AgentType(Enum):
    AI = "AI"
    HUMAN = "Human"


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class ProtocolError(Exception):
    """Malformed agent headers."""

    code = "protocol_error"


class UnknownAgentType(ProtocolError):
    code = "unknown_agent_type"


class MalformedIntent(ProtocolError):
    code = "malformed_intent"


class DuplicateHeader(ProtocolError):
    code = "duplicate_header"


class InvalidClaims(Exception):
    """Claim set violates its invariants."""


class AuthError(Exception):
    """Token verification failure."""

    code = "auth_error"


class BadSignature(AuthError):
    code = "bad_signature"


class Expired(AuthError):
    code = "expired"


class Malformed(AuthError):
    code = "malformed"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClaimSet:
    subject: str
    is_agent: bool
    role: str
    scopes: frozenset[str]
    issued_at: int
    expires_at: int

    def __post_init__(self):
        if self.expires_at <= self.issued_at:
            raise InvalidClaims("expires_at must be greater than issued_at")
        for scope in self.scopes:
            if not SCOPE_RE.match(scope):
                raise InvalidClaims(f"scope {scope!r} is not a lowercase resource:action pair")


@dataclass(frozen=True)
class AgentIdentity:
    agent_type: AgentType
    agent_id: str | None = None
    role: str | None = None
    intent: str | None = None
    context_id: str | None = None
    verified_claims: ClaimSet | None = None

    def with_claims(self, claims: ClaimSet) -> "AgentIdentity":
        return AgentIdentity(
            agent_type=self.agent_type,
            agent_id=self.agent_id,
            role=self.role,
            intent=self.intent,
            context_id=self.context_id,
            verified_claims=claims,
        )

    @property
    def effective_role(self) -> str | None:
        """Verified role when a token was presented, else the advisory header."""
        if self.verified_claims is not None:
            return self.verified_claims.role
        return self.role


@dataclass(frozen=True)
class ErrorRecovery:
    retry_after_seconds: int

    def __post_init__(self):
        if self.retry_after_seconds <= 0:
            raise ValueError("retry_after_seconds must be positive")


@dataclass(frozen=True)
class ResponseMetadata:
    data_last_updated: str | None = None
    rate_limit_limit: int | None = None
    rate_limit_remaining: int | None = None
    error_recovery: ErrorRecovery | None = None

    def __post_init__(self):
        for name in ("rate_limit_limit", "rate_limit_remaining"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative")
        if (
            self.rate_limit_limit is not None
            and self.rate_limit_remaining is not None
            and self.rate_limit_remaining > self.rate_limit_limit
        ):
            raise ValueError("rate_limit_remaining exceeds rate_limit_limit")


# ---------------------------------------------------------------------------
# Header parsing / emission
# ---------------------------------------------------------------------------


def parse_agent_headers(headers: Mapping[str, str] | Iterable[tuple[str, str]]) -> AgentIdentity:
    """Parse the X-Agent-* request headers into an AgentIdentity.

    Names are compared case-insensitively; a recognized name appearing more
    than once (including under a different casing) is a DuplicateHeader.
    Absent X-Agent-Type means a human caller. verified_claims stays unset;
    token verification is a separate stage.
    """
    pairs = headers.items() if isinstance(headers, Mapping) else headers
    seen: dict[str, str] = {}
    for name, value in pairs:
        folded = name.lower()
        if folded not in _RECOGNIZED_REQUEST_HEADERS:
            continue
        if folded in seen:
            raise DuplicateHeader(f"header {name} supplied more than once")
        seen[folded] = value.strip()

    agent_type = AgentType.HUMAN
    raw_type = seen.get(AGENT_TYPE_HEADER.lower())
    if raw_type is not None:
        if raw_type.lower() == "ai":
            agent_type = AgentType.AI
        elif raw_type.lower() == "human":
            agent_type = AgentType.HUMAN
        else:
            raise UnknownAgentType(f"unknown agent type {raw_type!r}")

    intent = seen.get(AGENT_INTENT_HEADER.lower()) or None
    if intent is not None and not INTENT_TOKEN_RE.match(intent):
        raise MalformedIntent(f"intent {intent!r} fails token grammar")

    return AgentIdentity(
        agent_type=agent_type,
        agent_id=seen.get(AGENT_ID_HEADER.lower()) or None,
        role=seen.get(AGENT_ROLE_HEADER.lower()) or None,
        intent=intent,
        context_id=seen.get(CONTEXT_ID_HEADER.lower()) or None,
    )


def emit_response_metadata(meta: ResponseMetadata) -> dict[str, str]:
    """Emit exactly the headers for the fields present; parse(emit(m)) == m."""
    out: dict[str, str] = {}
    if meta.data_last_updated is not None:
        out[DATA_LAST_UPDATED_HEADER] = meta.data_last_updated
    if meta.rate_limit_limit is not None:
        out[RATE_LIMIT_LIMIT_HEADER] = str(meta.rate_limit_limit)
    if meta.rate_limit_remaining is not None:
        out[RATE_LIMIT_REMAINING_HEADER] = str(meta.rate_limit_remaining)
    if meta.error_recovery is not None:
        out[ERROR_RECOVERY_HEADER] = f"RetryAfter={meta.error_recovery.retry_after_seconds}s"
    return out


def parse_response_metadata(headers: Mapping[str, str]) -> ResponseMetadata:
    """Inverse of emit_response_metadata (case-insensitive lookup)."""
    folded = {name.lower(): value for name, value in headers.items()}

    recovery = None
    raw = folded.get(ERROR_RECOVERY_HEADER.lower())
    if raw is not None:
        match = _RETRY_AFTER_RE.match(raw)
        if not match:
            raise ValueError(f"bad {ERROR_RECOVERY_HEADER} value {raw!r}")
        recovery = ErrorRecovery(retry_after_seconds=int(match.group(1)))

    def _int(name: str) -> int | None:
        value = folded.get(name.lower())
        return None if value is None else int(value)

    return ResponseMetadata(
        data_last_updated=folded.get(DATA_LAST_UPDATED_HEADER.lower()),
        rate_limit_limit=_int(RATE_LIMIT_LIMIT_HEADER),
        rate_limit_remaining=_int(RATE_LIMIT_REMAINING_HEADER),
        error_recovery=recovery,
    )


# ---------------------------------------------------------------------------
# Claim tokens
# ---------------------------------------------------------------------------


def _b64url_encode(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).decode("ascii").rstrip("=")


def _b64url_decode(segment: str) -> bytes:
    padding = "=" * (-len(segment) % 4)
    return base64.b64decode(segment + padding, altchars=b"-_", validate=True)


def _canonical_claim_document(claims: ClaimSet) -> bytes:
    doc = {
        "subject": claims.subject,
        "is_agent": claims.is_agent,
        "role": claims.role,
        "scopes": sorted(claims.scopes),
        "issued_at": claims.issued_at,
        "expires_at": claims.expires_at,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_claim_token(claims: ClaimSet, key: bytes) -> str:
    """Deterministically encode claims as a signed two-segment token."""
    if not key:
        raise InvalidClaims("signing key must be non-empty")
    seg1 = _b64url_encode(_canonical_claim_document(claims))
    mac = hmac.new(key, seg1.encode("ascii"), hashlib.sha256).digest()
    return f"{seg1}.{_b64url_encode(mac)}"


def verify_claim_signature(token: str, key: bytes) -> ClaimSet:
    """Structural + signature verification only; no validity-window check.

    Deterministic in (token, key), so callers may cache the result; the
    window check in verify_claim_token must still run per request.
    """
    parts = token.split(".")
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise Malformed("token must have two non-empty segments")
    seg1, seg2 = parts
    try:
        doc_bytes = _b64url_decode(seg1)
        supplied_mac = _b64url_decode(seg2)
    except (ValueError, TypeError) as exc:
        raise Malformed(f"bad base64url segment: {exc}") from exc

    expected_mac = hmac.new(key, seg1.encode("ascii"), hashlib.sha256).digest()
    if not hmac.compare_digest(expected_mac, supplied_mac):
        raise BadSignature("signature mismatch")

    try:
        doc = json.loads(doc_bytes)
        claims = ClaimSet(
            subject=doc["subject"],
            is_agent=bool(doc["is_agent"]),
            role=doc["role"],
            scopes=frozenset(doc["scopes"]),
            issued_at=int(doc["issued_at"]),
            expires_at=int(doc["expires_at"]),
        )
    except (KeyError, TypeError, ValueError, InvalidClaims) as exc:
        raise Malformed(f"bad claim document: {exc}") from exc
    return claims


def check_claim_window(claims: ClaimSet, now: int) -> None:
    """Exclusive expiry boundary: valid iff issued_at <= now < expires_at."""
    if now < claims.issued_at:
        raise Expired("token not yet valid")
    if now >= claims.expires_at:
        raise Expired("token expired")


def verify_claim_token(token: str, key: bytes, now: int) -> ClaimSet:
    """Return the claims iff the signature matches and the token is live.

    Signature comparison is constant-time. Expiry boundary is exclusive:
    valid iff issued_at <= now < expires_at.
    """
    claims = verify_claim_signature(token, key)
    check_claim_window(claims, now)
    return claims
