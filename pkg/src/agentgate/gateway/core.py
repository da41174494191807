"""The request pipeline composing every module into one gateway.

Stage order (each stage short-circuits to finalization with its mapped
status):

     1. agent header parsing                        400
     2. claim token verification (required for AI)  401
     3. rate limiting                               429
     4. routing (AQL body / path / intent header)   400, 404
     5. intent resolution                           404
     6. authorization (RBAC + intent verification)  403
     7. consent check                               403
     8. context restore + parameter back-fill       422
     9. cache lookup (non-mutations)                200 on hit
    10. schedule -> plan execution with retries     502, 503
    11. field-selection pruning
    12. cache fill / tag invalidation
    13. response metadata
    14. session record
    15. audit append + anomaly detection (write-ahead, always)

Finalization (13-15) runs for every request whatever the outcome, so each
request yields exactly one audit record and every response carries
rate-limit metadata. Routing sits after rate limiting, so administrative
endpoints (/api/discover, /metrics, /healthz, /consent/update) consume
budget like any other request.
"""

from __future__ import annotations

import json
import time
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime

from .. import aql, context, registry as registry_mod, security
from ..clock import Clock, SystemClock
from ..flow import (
    CacheEntry,
    ExhaustedRetries,
    PriorityScheduler,
    QueueFull,
    ResponseCache,
    UpstreamFailure,
    make_cache_key,
    with_retry,
)
from ..observability import (
    AnomalyDetector,
    AuditLog,
    AuditRecord,
    CacheStatus,
    Decision,
    JsonlSink,
    MetricsCounters,
    SinkUnavailable,
)
from ..protocol import (
    AgentIdentity,
    AgentType,
    AuthError,
    ClaimSet,
    ErrorRecovery,
    INTENT_TOKEN_RE,
    ProtocolError,
    ResponseMetadata,
    check_claim_window,
    emit_response_metadata,
    parse_agent_headers,
    verify_claim_signature,
)
from ..registry import IntentSpec, UnknownIntent, build_discovery
from ..security import ConsentStore, Denied, DenialReason, Limited, Pass, RateLimiter, UnknownCategory
from .config import GatewayConfig
from .upstream import build_upstreams

JSON_CONTENT_TYPE = "application/json"


@dataclass(frozen=True)
class GatewayRequest:
    method: str
    path: str
    headers: Mapping[str, str] | list[tuple[str, str]]
    body: bytes = b""
    client_address: str = "127.0.0.1"

    def header(self, name: str) -> str | None:
        items = self.headers.items() if isinstance(self.headers, Mapping) else self.headers
        folded = name.lower()
        for key, value in items:
            if key.lower() == folded:
                return value
        return None


@dataclass
class GatewayResponse:
    status: int
    headers: dict[str, str]
    body: bytes

    def json(self):
        return json.loads(self.body)


class PlanExecutionError(Exception):
    """A plan step failed after retries; nothing was cached."""

    def __init__(self, step_index: int, upstream: str, cause: Exception):
        self.step_index = step_index
        self.upstream = upstream
        self.cause = cause
        super().__init__(f"plan step {step_index} ({upstream}) failed: {cause}")


class _Abort(Exception):
    """Internal control flow: jump to finalization with an error outcome."""

    def __init__(self, status: int, decision: Decision, code: str, message: str,
                 retry_after: int | None = None, **extra):
        self.status = status
        self.decision = decision
        self.code = code
        self.message = message
        self.retry_after = retry_after
        self.extra = extra
        super().__init__(message)


@dataclass
class _State:
    identity: AgentIdentity | None = None
    rate: Pass | Limited | None = None
    intent_name: str | None = None
    spec: IntentSpec | None = None
    query: aql.AqlQuery | None = None
    cache: CacheStatus = CacheStatus.BYPASS
    data_last_updated: str | None = None
    categories: frozenset[str] = frozenset()


def _parse_rfc3339(stamp: str) -> datetime | None:
    try:
        return datetime.fromisoformat(stamp.replace("Z", "+00:00"))
    except ValueError:
        return None


def _oldest(stamps: list[str]) -> str | None:
    dated = [(parsed, s) for s in stamps if (parsed := _parse_rfc3339(s)) is not None]
    if not dated:
        return None
    return min(dated)[1]


def _path_segment(value: aql.Scalar) -> str:
    if value is True:
        return "true"
    if value is False:
        return "false"
    return str(value)


class Gateway:
    """One configured gateway instance with all shared state."""

    def __init__(self, config: GatewayConfig, clock: Clock | None = None):
        self.config = config
        self.clock = clock or SystemClock()
        self.registry = config.registry
        self.upstreams = build_upstreams(config.upstreams)
        self.limiter = RateLimiter(config.policy.rate_limits)
        self.consent = ConsentStore(known_categories=self.registry.consent_categories())
        self.sessions = context.SessionStore(clock=self.clock)
        self.cache = ResponseCache(capacity=config.cache.capacity)
        self.audit = AuditLog(
            sink=JsonlSink(config.audit_sink_path) if config.audit_sink_path else None
        )
        self.detector = AnomalyDetector(rules=config.anomaly_rules)
        self.metrics = MetricsCounters()
        # Signature verification is deterministic in (token, key); caching it
        # keeps HMAC work off the hot path. The validity-window check always
        # runs against the live clock.
        self._token_cache: dict[str, ClaimSet] = {}
        self.scheduler: PriorityScheduler | None = None
        if config.scheduler.enabled:
            self.scheduler = PriorityScheduler(
                capacity=config.scheduler.capacity,
                workers=config.scheduler.worker_count(),
                aging_interval_ms=config.scheduler.aging_interval_ms,
                clock=self.clock,
            )

    def close(self) -> None:
        if self.scheduler is not None:
            self.scheduler.shutdown()

    # ------------------------------------------------------------------
    # Pipeline
    # ------------------------------------------------------------------

    def handle(self, request: GatewayRequest) -> GatewayResponse:
        started = time.perf_counter()
        state = _State()
        try:
            status, payload = self._run(request, state)
            decision = Decision.OK
            retry_after = None
        except _Abort as abort:
            status = abort.status
            payload = {"error": {"code": abort.code, "message": abort.message, **abort.extra}}
            decision = abort.decision
            retry_after = abort.retry_after
        return self._finalize(request, state, status, payload, decision, retry_after, started)

    def _run(self, request: GatewayRequest, state: _State):
        # 1. headers
        try:
            identity = parse_agent_headers(request.headers)
        except ProtocolError as exc:
            raise _Abort(400, Decision.BAD_REQUEST, exc.code, str(exc)) from exc
        state.identity = identity

        # 2. token verification
        authorization = request.header("Authorization")
        if authorization is not None:
            token = authorization.removeprefix("Bearer ").strip()
            try:
                claims = self._token_cache.get(token)
                if claims is None:
                    claims = verify_claim_signature(token, self.config.token_key)
                    if len(self._token_cache) >= 4096:
                        self._token_cache.clear()
                    self._token_cache[token] = claims
                check_claim_window(claims, int(self.clock.now()))
            except AuthError as exc:
                raise _Abort(401, Decision.UNAUTHENTICATED, exc.code, str(exc)) from exc
            identity = identity.with_claims(claims)
            state.identity = identity
        elif identity.agent_type is AgentType.AI:
            raise _Abort(
                401, Decision.UNAUTHENTICATED, "token_required",
                "AI callers must present a claim token",
            )

        # 3. rate limiting
        rate = self.limiter.check(identity, request.client_address, self.clock.now())
        state.rate = rate
        if isinstance(rate, Limited):
            raise _Abort(
                429, Decision.RATE_LIMITED, "rate_limited",
                "request budget exhausted for this window",
                retry_after=rate.retry_after_seconds,
            )

        # 4. routing
        terminal = self._route_admin(request, identity)
        if terminal is not None:
            return terminal
        query = self._route_intent(request, identity, state)
        state.intent_name = query.intent
        state.query = query

        # 5. resolution
        try:
            spec = registry_mod.resolve(self.registry, query.intent)
        except UnknownIntent as exc:
            raise _Abort(
                404, Decision.UNKNOWN_INTENT, "unknown_intent", str(exc),
                known_intents=exc.known,
            ) from exc
        state.spec = spec
        state.categories = spec.consent_categories
        self._validate_args(query, spec)
        if query.selection is not None:
            try:
                aql.validate_selection(query.selection, spec.result_schema)
            except aql.FieldUnknown as exc:
                raise _Abort(400, Decision.BAD_REQUEST, "field_unknown", str(exc), path=exc.path) from exc

        # 6. authorization
        decision = security.authorize(identity, spec, self.config.policy)
        if isinstance(decision, Denied):
            audit_decision = (
                Decision.INTENT_MISMATCH
                if decision.reason is DenialReason.INTENT_MISMATCH
                else Decision.DENIED_SCOPE
            )
            raise _Abort(
                403, audit_decision, "denied", f"authorization denied: {decision.reason.value}",
                reason=decision.reason.value,
                **({"detail": decision.detail} if decision.detail else {}),
            )

        # 7. consent
        subject = self._consent_subject(identity, request)
        consent = self.consent.check(subject, spec.consent_categories)
        if not consent.allowed:
            raise _Abort(
                403, Decision.DENIED_CONSENT, "consent_required",
                "consent missing for requested data categories",
                missing_categories=consent.missing,
            )

        # 8. context + back-fill
        if identity.context_id:
            with self.sessions.lock_for(identity.context_id):
                session = self.sessions.restore(identity.context_id)
                try:
                    query = context.backfill(session, query, spec)
                except context.MissingParam as exc:
                    raise _Abort(
                        422, Decision.MISSING_PARAM, "missing_params", str(exc), missing=exc.names,
                    ) from exc
        else:
            missing = [
                p.name for p in spec.required_params() if p.name not in {n for n, _ in query.args}
            ]
            if missing:
                raise _Abort(
                    422, Decision.MISSING_PARAM, "missing_params",
                    f"missing required params: {', '.join(missing)}", missing=missing,
                )
        state.query = query

        # 9. cache lookup
        ttl = self._effective_ttl(spec)
        cacheable = self.config.cache.enabled and not spec.mutation and ttl > 0
        cache_key = None
        if cacheable:
            cache_key = make_cache_key(spec, query, identity.effective_role, identity.context_id)
            hit = self.cache.get(cache_key, self.clock.now())
            if hit is not None:
                state.cache = CacheStatus.HIT
                state.data_last_updated = hit.meta.data_last_updated
                return 200, hit.body
            state.cache = CacheStatus.MISS

        # 10-11. schedule -> execute plan with retries -> prune
        work = self._make_work(spec, query)
        try:
            if self.scheduler is not None:
                try:
                    body, freshness = self.scheduler.run_sync(work, spec.priority_class)
                except QueueFull as exc:
                    raise _Abort(
                        503, Decision.OVERLOADED, "overloaded", "scheduler queue is full",
                        retry_after=exc.retry_after_seconds,
                    ) from exc
            else:
                body, freshness = work()
        except (ExhaustedRetries, PlanExecutionError, UpstreamFailure) as exc:
            if spec.mutation:
                # The upstream may have applied the mutation before failing;
                # cached reads over the same resources cannot be trusted.
                self.cache.invalidate_tags(spec.resource_tags)
            retry_after = 1
            step = None
            cause = exc
            if isinstance(exc, PlanExecutionError):
                step = exc.step_index
                cause = exc.cause
            if isinstance(cause, ExhaustedRetries):
                cause = cause.last
            if isinstance(cause, UpstreamFailure) and cause.retry_after_seconds:
                retry_after = cause.retry_after_seconds
            raise _Abort(
                502, Decision.UPSTREAM_ERROR, "upstream_error", str(exc),
                retry_after=retry_after, **({"step": step} if step is not None else {}),
            ) from exc

        # 12. cache fill / invalidation
        if spec.mutation:
            self.cache.invalidate_tags(spec.resource_tags)
        elif cacheable and cache_key is not None:
            self.cache.put(
                cache_key,
                CacheEntry(
                    body=body,
                    meta=ResponseMetadata(data_last_updated=freshness),
                    stored_at=self.clock.now(),
                    ttl_seconds=ttl,
                    tags=spec.resource_tags,
                ),
            )
        state.data_last_updated = freshness
        return 200, body

    # ------------------------------------------------------------------
    # Routing helpers
    # ------------------------------------------------------------------

    def _route_admin(self, request: GatewayRequest, identity: AgentIdentity):
        method, path = request.method.upper(), request.path
        if method == "GET":
            if path == "/api/discover":
                return 200, self.discovery_document()
            if path == "/metrics":
                return 200, self.metrics_document()
            if path == "/healthz":
                return 200, {"status": "ok"}
            raise _Abort(404, Decision.UNKNOWN_INTENT, "unknown_route", f"no route for GET {path}")
        if method == "POST" and path == "/consent/update":
            return self._consent_update(request)
        if method not in ("GET", "POST"):
            raise _Abort(404, Decision.UNKNOWN_INTENT, "unknown_route", f"no route for {method} {path}")
        return None

    def _route_intent(self, request: GatewayRequest, identity: AgentIdentity, state: _State) -> aql.AqlQuery:
        path = request.path
        if path == "/aql":
            try:
                text = request.body.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise _Abort(400, Decision.BAD_REQUEST, "bad_encoding", "body is not UTF-8") from exc
            try:
                return aql.parse(text)
            except aql.ParseError as exc:
                raise _Abort(
                    400, Decision.BAD_REQUEST, "parse_error", str(exc),
                    position=exc.position, expected=exc.expected,
                ) from exc
        if path.startswith("/intent/"):
            name = path[len("/intent/"):]
            if not INTENT_TOKEN_RE.match(name):
                raise _Abort(404, Decision.UNKNOWN_INTENT, "unknown_route", f"bad intent route {path!r}")
            state.intent_name = name
            return aql.AqlQuery(intent=name, args=self._args_from_body(request))
        # Any other POST path is an intent endpoint selected by the declared
        # header intent ("/order/manage" style: one route, many tasks).
        if identity.intent is not None:
            state.intent_name = identity.intent
            return aql.AqlQuery(intent=identity.intent, args=self._args_from_body(request))
        raise _Abort(
            404, Decision.UNKNOWN_INTENT, "unknown_route",
            f"no route for POST {path} without X-Agent-Intent",
        )

    def _args_from_body(self, request: GatewayRequest) -> tuple[tuple[str, aql.Scalar], ...]:
        if not request.body.strip():
            return ()
        try:
            doc = json.loads(request.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise _Abort(400, Decision.BAD_REQUEST, "bad_body", f"body is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise _Abort(400, Decision.BAD_REQUEST, "bad_body", "body must be a JSON object of args")
        args = []
        for name, value in doc.items():
            if not INTENT_TOKEN_RE.match(name):
                raise _Abort(400, Decision.BAD_REQUEST, "bad_body", f"bad arg name {name!r}")
            if isinstance(value, bool) or (isinstance(value, int) and not isinstance(value, bool)) \
                    or isinstance(value, str):
                args.append((name, value))
            else:
                raise _Abort(
                    400, Decision.BAD_REQUEST, "bad_body",
                    f"arg {name!r} must be a string, integer or boolean",
                )
        return tuple(args)

    def _validate_args(self, query: aql.AqlQuery, spec: IntentSpec) -> None:
        for name, value in query.args:
            param = spec.param(name)
            if param is None:
                raise _Abort(
                    400, Decision.BAD_REQUEST, "unknown_param",
                    f"intent {spec.name} declares no param {name!r}",
                )
            if not param.matches(value):
                raise _Abort(
                    400, Decision.BAD_REQUEST, "param_type",
                    f"param {name!r} must be of type {param.type}",
                )

    def _consent_update(self, request: GatewayRequest):
        try:
            doc = json.loads(request.body.decode("utf-8"))
            subject = doc["subject"]
            category = doc["category"]
            granted = doc["granted"]
            if not isinstance(subject, str) or not subject \
                    or not isinstance(category, str) or not isinstance(granted, bool):
                raise ValueError("subject/category must be strings, granted a boolean")
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise _Abort(400, Decision.BAD_REQUEST, "bad_body", f"bad consent body: {exc}") from exc
        try:
            record = self.consent.update(subject, category, granted, self.clock.now())
        except UnknownCategory as exc:
            raise _Abort(
                400, Decision.BAD_REQUEST, "unknown_category", str(exc), known_categories=exc.known,
            ) from exc
        return 200, {
            "subject": record.subject,
            "category": record.category,
            "granted": record.granted,
            "updated_at": record.updated_at,
        }

    def _consent_subject(self, identity: AgentIdentity, request: GatewayRequest) -> str:
        if identity.verified_claims is not None:
            return identity.verified_claims.subject
        return identity.agent_id or request.client_address

    # ------------------------------------------------------------------
    # Plan execution
    # ------------------------------------------------------------------

    def _effective_ttl(self, spec: IntentSpec) -> int:
        if spec.mutation:
            return 0
        if spec.cache_ttl_seconds is None:
            return self.config.cache.default_ttl_seconds
        return spec.cache_ttl_seconds

    def _make_work(self, spec: IntentSpec, query: aql.AqlQuery):
        def work():
            result, freshness = self.execute_plan(spec, dict(query.args))
            if query.selection is not None:
                result = aql.prune(result, query.selection, spec.result_schema)
            body = json.dumps(result, separators=(",", ":")).encode("utf-8")
            return body, freshness

        return work

    def execute_plan(self, spec: IntentSpec, args: dict[str, aql.Scalar]):
        """Run every plan step (concurrently when there are several), merge
        results under their merge keys, and report the oldest freshness."""
        steps = spec.plan.steps
        segments = {name: _path_segment(value) for name, value in args.items()}

        def run_step(index_step):
            index, step = index_step
            upstream = self.upstreams[step.upstream]
            path = step.path_template.format(**segments)
            call = lambda: upstream.fetch(path)  # noqa: E731
            try:
                if spec.mutation:
                    return index, call()  # mutations are never retried
                return index, with_retry(self.config.retry, call, self.clock)
            except UpstreamFailure as exc:
                raise PlanExecutionError(index, step.upstream, exc) from exc
            except ExhaustedRetries as exc:
                raise PlanExecutionError(index, step.upstream, exc) from exc

        if len(steps) == 1:
            _, (body, freshness) = run_step((0, steps[0]))
            return body, freshness

        with ThreadPoolExecutor(max_workers=len(steps)) as pool:
            results = list(pool.map(run_step, enumerate(steps)))
        merged: dict = {}
        stamps: list[str] = []
        for index, (body, freshness) in sorted(results):
            merged[steps[index].merge_key] = body
            if freshness:
                stamps.append(freshness)
        return merged, _oldest(stamps)

    # ------------------------------------------------------------------
    # Documents
    # ------------------------------------------------------------------

    def discovery_document(self) -> dict:
        return build_discovery(self.registry, self.config.cache.default_ttl_seconds)

    def discovery_bytes(self) -> bytes:
        return json.dumps(self.discovery_document(), sort_keys=True, separators=(",", ":")).encode()

    def metrics_document(self) -> dict:
        doc = self.metrics.snapshot()
        doc["alerts"] = [
            {
                "rule": a.rule.value,
                "subject": a.subject,
                "window_start": a.window_start,
                "observed": a.observed,
                "triggered_at": a.triggered_at,
            }
            for a in self.detector.alerts()
        ]
        return doc

    # ------------------------------------------------------------------
    # Finalization (stages 13-15)
    # ------------------------------------------------------------------

    def _finalize(
        self,
        request: GatewayRequest,
        state: _State,
        status: int,
        payload,
        decision: Decision,
        retry_after: int | None,
        started: float,
    ) -> GatewayResponse:
        identity = state.identity

        # 13. response metadata
        if isinstance(state.rate, Pass):
            limit, remaining = state.rate.limit, state.rate.remaining
        elif isinstance(state.rate, Limited):
            limit, remaining = state.rate.limit, 0
        else:
            limit, remaining = self.limiter.peek(
                identity or AgentIdentity(agent_type=AgentType.HUMAN),
                request.client_address,
                self.clock.now(),
            )
        meta = ResponseMetadata(
            data_last_updated=state.data_last_updated if status == 200 else None,
            rate_limit_limit=limit,
            rate_limit_remaining=remaining,
            error_recovery=ErrorRecovery(retry_after) if retry_after else None,
        )
        headers = {"Content-Type": JSON_CONTENT_TYPE}
        headers.update(emit_response_metadata(meta))
        body = payload if isinstance(payload, bytes) else json.dumps(payload, separators=(",", ":")).encode()

        # 14. session record
        if identity is not None and identity.context_id and state.spec is not None and state.query is not None:
            if status == 200:
                outcome = context.Outcome.OK
            elif status in (403, 429):
                outcome = context.Outcome.DENIED
            else:
                outcome = context.Outcome.ERROR
            with self.sessions.lock_for(identity.context_id):
                session = self.sessions.restore(identity.context_id)
                context.record(session, state.query, state.spec, outcome, meta, self.clock.now())

        # 15. audit + anomaly detection, write-ahead of the response
        record = AuditRecord(
            timestamp=self.clock.now(),
            decision=decision,
            cache=state.cache,
            context_id=identity.context_id if identity else None,
            agent_id=identity.agent_id if identity else None,
            agent_type=identity.agent_type.value if identity else None,
            role=identity.effective_role if identity else None,
            intent=state.intent_name,
            params_digest=aql.args_digest(state.query.args) if state.query else None,
            data_categories=state.categories,
            latency_ms=(time.perf_counter() - started) * 1000.0,
            client_address=request.client_address,
        )
        self.metrics.observe(record)
        try:
            self.audit.append(record)
            for alert in self.detector.detect(record, self.clock.now()):
                self.audit.append_alert(alert)
        except SinkUnavailable as exc:
            error = {"error": {"code": "audit_unavailable", "message": str(exc)}}
            return GatewayResponse(
                status=500, headers=headers, body=json.dumps(error, separators=(",", ":")).encode()
            )
        return GatewayResponse(status=status, headers=headers, body=body)
