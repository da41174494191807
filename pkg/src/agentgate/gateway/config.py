"""Gateway configuration: one JSON document wiring every module together.

Relative paths (registry, fixtures, audit sink) resolve against the config
file's directory. GATEWAY_TOKEN_KEY in the environment overrides the
configured token key. The config digest — used by trace replay to detect a
changed setup — covers the config document and the registry document, but
deliberately not fixture contents: a changed fixture must surface as a
replay divergence, not a config mismatch.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..flow import RetryPolicy
from ..observability import AnomalyRule, DEFAULT_RULES, RuleKind
from ..registry import ConfigError, IntentRegistry, load_registry
from ..security import PolicyConfig, RateLimitPolicy, RoleDefinition, WindowLimit
from ..protocol import SCOPE_RE

DEFAULT_LISTEN = "127.0.0.1:8080"


@dataclass(frozen=True)
class CacheSettings:
    enabled: bool = True
    capacity: int = 256
    default_ttl_seconds: int = 30


@dataclass(frozen=True)
class SchedulerSettings:
    enabled: bool = True
    capacity: int = 64
    workers: int | None = None  # None -> os.cpu_count()
    aging_interval_ms: int = 1000

    def worker_count(self) -> int:
        return self.workers if self.workers is not None else (os.cpu_count() or 2)


@dataclass(frozen=True)
class UpstreamConfig:
    name: str
    kind: str  # "mock" | "remote"
    fixture_path: Path | None = None
    fixture: dict | None = None
    base_url: str | None = None
    timeout_seconds: float = 5.0


@dataclass(frozen=True)
class GatewayConfig:
    listen: str
    token_key: bytes
    registry: IntentRegistry
    policy: PolicyConfig
    cache: CacheSettings
    scheduler: SchedulerSettings
    retry: RetryPolicy
    upstreams: dict[str, UpstreamConfig]
    audit_sink_path: Path | None
    anomaly_rules: tuple[AnomalyRule, ...]
    config_digest: str
    session_ttl_seconds: int = 3600
    source: dict = field(default_factory=dict, repr=False)


def _canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _window(doc, path: str) -> WindowLimit:
    if not isinstance(doc, dict):
        raise ConfigError(path, "rate limit must be an object")
    try:
        return WindowLimit(limit=int(doc["limit"]), window_seconds=int(doc["window_seconds"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(path, f"bad rate limit: {exc}") from exc


def _parse_policy(doc: dict) -> PolicyConfig:
    roles: dict[str, RoleDefinition] = {}
    for name, scopes in (doc.get("roles") or {}).items():
        if not isinstance(scopes, list):
            raise ConfigError(f"$.policy.roles.{name}", "scopes must be a list")
        for scope in scopes:
            if not isinstance(scope, str) or not SCOPE_RE.match(scope):
                raise ConfigError(f"$.policy.roles.{name}", f"bad scope {scope!r}")
        roles[name] = RoleDefinition(name=name, scopes=frozenset(scopes))

    limits_doc = doc.get("rate_limits") or {}
    defaults = RateLimitPolicy()
    overrides = {
        role: _window(window, f"$.policy.rate_limits.role_overrides.{role}")
        for role, window in (limits_doc.get("role_overrides") or {}).items()
    }
    rate_limits = RateLimitPolicy(
        ai=_window(limits_doc["AI"], "$.policy.rate_limits.AI") if "AI" in limits_doc else defaults.ai,
        human=(
            _window(limits_doc["Human"], "$.policy.rate_limits.Human")
            if "Human" in limits_doc
            else defaults.human
        ),
        role_overrides=overrides,
    )
    return PolicyConfig(roles=roles, rate_limits=rate_limits)


def _parse_anomaly_rules(raw) -> tuple[AnomalyRule, ...]:
    if raw is None:
        return DEFAULT_RULES
    if not isinstance(raw, list):
        raise ConfigError("$.anomaly_rules", "must be a list")
    rules = []
    for i, doc in enumerate(raw):
        path = f"$.anomaly_rules[{i}]"
        try:
            rules.append(
                AnomalyRule(
                    kind=RuleKind(doc["kind"]),
                    threshold=int(doc["threshold"]),
                    window_seconds=int(doc["window_seconds"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(path, f"bad anomaly rule: {exc}") from exc
    return tuple(rules)


def _parse_upstream(name: str, doc, base_dir: Path) -> UpstreamConfig:
    path = f"$.upstreams.{name}"
    if not isinstance(doc, dict):
        raise ConfigError(path, "upstream must be an object")
    kind = doc.get("kind", "mock")
    if kind == "mock":
        fixture_rel = doc.get("fixture")
        if not isinstance(fixture_rel, str):
            raise ConfigError(f"{path}.fixture", "mock upstream needs a fixture path")
        fixture_path = (base_dir / fixture_rel).resolve()
        try:
            fixture = json.loads(fixture_path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"{path}.fixture", f"cannot read fixture: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}.fixture", f"fixture is not valid JSON: {exc}") from exc
        if not isinstance(fixture, dict):
            raise ConfigError(f"{path}.fixture", "fixture must be an object of path entries")
        return UpstreamConfig(name=name, kind="mock", fixture_path=fixture_path, fixture=fixture)
    if kind == "remote":
        base_url = doc.get("base_url")
        if not isinstance(base_url, str) or not base_url.startswith(("http://", "https://")):
            raise ConfigError(f"{path}.base_url", "remote upstream needs an http(s) base_url")
        return UpstreamConfig(
            name=name,
            kind="remote",
            base_url=base_url.rstrip("/"),
            timeout_seconds=float(doc.get("timeout_seconds", 5.0)),
        )
    raise ConfigError(f"{path}.kind", f"unknown upstream kind {kind!r}")


def loads(text: str, base_dir: str | Path = ".") -> GatewayConfig:
    """Parse and validate a gateway config document."""
    base_dir = Path(base_dir)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("$", "config must be an object")

    registry_rel = doc.get("registry")
    if not isinstance(registry_rel, str):
        raise ConfigError("$.registry", "registry path is required")
    registry_path = (base_dir / registry_rel).resolve()
    try:
        registry_text = registry_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("$.registry", f"cannot read registry: {exc}") from exc
    registry = load_registry(registry_text)

    token_key = os.environ.get("GATEWAY_TOKEN_KEY") or doc.get("token_key") or ""
    if not token_key:
        raise ConfigError("$.token_key", "token key must be non-empty")

    flow_doc = doc.get("flow") or {}
    cache_doc = flow_doc.get("cache") or {}
    sched_doc = flow_doc.get("scheduler") or {}
    retry_doc = flow_doc.get("retry") or {}
    try:
        cache = CacheSettings(
            enabled=bool(cache_doc.get("enabled", True)),
            capacity=int(cache_doc.get("capacity", 256)),
            default_ttl_seconds=int(cache_doc.get("default_ttl_seconds", 30)),
        )
        scheduler = SchedulerSettings(
            enabled=bool(sched_doc.get("enabled", True)),
            capacity=int(sched_doc.get("capacity", 64)),
            workers=None if sched_doc.get("workers") is None else int(sched_doc["workers"]),
            aging_interval_ms=int(sched_doc.get("aging_interval_ms", 1000)),
        )
        retry = RetryPolicy(
            max_attempts=int(retry_doc.get("max_attempts", 3)),
            base_backoff_ms=int(retry_doc.get("base_backoff_ms", 100)),
            multiplier=int(retry_doc.get("multiplier", 2)),
            honor_retry_after=bool(retry_doc.get("honor_retry_after", True)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError("$.flow", f"bad flow settings: {exc}") from exc
    if scheduler.enabled and scheduler.worker_count() < 1:
        raise ConfigError("$.flow.scheduler.workers", "enabled scheduler needs at least one worker")

    upstreams = {
        name: _parse_upstream(name, updoc, base_dir)
        for name, updoc in (doc.get("upstreams") or {}).items()
    }
    unresolved = sorted(registry.upstream_names() - set(upstreams))
    if unresolved:
        raise ConfigError("$.upstreams", f"plans reference unconfigured upstreams: {unresolved}")

    audit_rel = doc.get("audit_sink")
    audit_sink_path = (base_dir / audit_rel).resolve() if isinstance(audit_rel, str) else None

    digest = hashlib.sha256(_canonical(doc) + b"\x00" + registry_text.encode("utf-8")).hexdigest()

    return GatewayConfig(
        listen=doc.get("listen", DEFAULT_LISTEN),
        token_key=str(token_key).encode("utf-8"),
        registry=registry,
        policy=_parse_policy(doc.get("policy") or {}),
        cache=cache,
        scheduler=scheduler,
        retry=retry,
        upstreams=upstreams,
        audit_sink_path=audit_sink_path,
        anomaly_rules=_parse_anomaly_rules(doc.get("anomaly_rules")),
        config_digest=digest,
        session_ttl_seconds=int(doc.get("session_ttl_seconds", 3600)),
        source=doc,
    )


def load(path: str | Path) -> GatewayConfig:
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), base_dir=path.parent)
