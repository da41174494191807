"""Agent Development Kit: scripted scenarios, trace record/replay, intent
templates, and run reports.

A scenario is a JSON playbook of steps (schemas/scenario.schema.json). Each
step describes an agent profile (headers, optionally token claims signed
with the gateway key), an action (AQL text or an intent route with a JSON
body), and optional expectations. Runs are driven by a virtual clock, so a
scenario is a pure function of (scenario, fixtures, seed): running it twice
yields byte-identical traces.

A trace stores every request/response pair plus the config digest of the
gateway that produced it. Replay re-issues the recorded requests at the
recorded virtual times against a freshly built gateway and reports the
first differing field path per step; a full match is equivalent to equal
transcript digests.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .clock import VirtualClock
from .gateway import Gateway, GatewayRequest
from .protocol import ClaimSet, encode_claim_token
from . import aql

DEFAULT_BASE_TIME = 1_700_000_000.0
DEFAULT_TOKEN_TTL = 3600

TRACKED_HEADERS = (
    "X-Data-LastUpdated",
    "X-RateLimit-Limit",
    "X-RateLimit-Remaining",
    "X-Error-Recovery",
)


class ScenarioError(Exception):
    """Scenario document is malformed or a step cannot be assembled."""


class ConfigMismatch(Exception):
    """Trace was recorded against a differently configured gateway."""


class TraceIntegrityError(Exception):
    """Stored transcript digest does not match the entries."""


@dataclass
class StepResult:
    index: int
    passed: bool
    diffs: list[str] = field(default_factory=list)


@dataclass
class ScenarioOutcome:
    trace: dict
    results: list[StepResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


@dataclass
class ReplayReport:
    matched: bool
    diverged: list[dict]
    recorded_digest: str
    replayed_digest: str


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def transcript_digest(entries: list[dict]) -> str:
    return hashlib.sha256(_canonical(entries).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Scenario loading and assembly
# ---------------------------------------------------------------------------


def load_scenario(source: str | Path | dict) -> dict:
    if isinstance(source, dict):
        doc = source
    else:
        doc = json.loads(Path(source).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    steps = doc.get("steps")
    if not isinstance(steps, list) or not steps:
        raise ScenarioError("scenario needs a non-empty steps list")
    if not isinstance(doc.get("seed", 0), int):
        raise ScenarioError("seed must be an integer")
    return doc


def _step_headers(step: dict, gateway: Gateway, clock: VirtualClock) -> dict[str, str]:
    profile = step.get("profile") or {}
    if not isinstance(profile, dict):
        raise ScenarioError("step profile must be an object")
    headers: dict[str, str] = {}
    agent_type = profile.get("agent_type")
    if agent_type:
        headers["X-Agent-Type"] = agent_type
    if profile.get("role"):
        headers["X-Agent-Role"] = profile["role"]
    if profile.get("agent_id"):
        headers["X-Agent-Id"] = profile["agent_id"]
    if step.get("context_id"):
        headers["X-Context-Id"] = step["context_id"]
    if step.get("intent_header"):
        headers["X-Agent-Intent"] = step["intent_header"]

    claims_doc = profile.get("claims")
    if claims_doc is not None:
        try:
            issued_at = int(clock.now())
            claims = ClaimSet(
                subject=claims_doc["subject"],
                is_agent=bool(claims_doc.get("is_agent", True)),
                role=claims_doc.get("role", profile.get("role", "")),
                scopes=frozenset(claims_doc.get("scopes", [])),
                issued_at=issued_at,
                expires_at=issued_at + int(claims_doc.get("ttl_seconds", DEFAULT_TOKEN_TTL)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad claims in profile: {exc}") from exc
        headers["Authorization"] = "Bearer " + encode_claim_token(claims, gateway.config.token_key)
    return headers


def _step_request(step: dict, gateway: Gateway, clock: VirtualClock) -> GatewayRequest:
    action = step.get("action")
    if not isinstance(action, dict):
        raise ScenarioError("step action must be an object")
    headers = _step_headers(step, gateway, clock)
    address = step.get("client_address", "10.0.0.1")
    if "aql" in action:
        return GatewayRequest(
            method="POST", path="/aql", headers=headers,
            body=str(action["aql"]).encode("utf-8"), client_address=address,
        )
    if "path" in action:
        method = action.get("method", "POST").upper()
        body = b""
        if action.get("body") is not None:
            body = json.dumps(action["body"], sort_keys=True).encode("utf-8")
        return GatewayRequest(
            method=method, path=action["path"], headers=headers, body=body, client_address=address,
        )
    raise ScenarioError("step action needs either 'aql' or 'path'")


def _snapshot_entry(request: GatewayRequest, response, timestamp: float) -> dict:
    return {
        "virtual_timestamp": timestamp,
        "request": {
            "method": request.method,
            "path": request.path,
            "headers": dict(request.headers),
            "body": request.body.decode("utf-8", errors="replace"),
            "client_address": request.client_address,
        },
        "response": {
            "status": response.status,
            "headers": {name: response.headers[name] for name in sorted(response.headers)},
            "body": response.body.decode("utf-8", errors="replace"),
        },
    }


def _lookup_path(tree, dotted: str):
    node = tree
    for part in dotted.split("."):
        if isinstance(node, dict) and part in node:
            node = node[part]
        else:
            return None
    return node


def _check_expectations(step: dict, entry: dict, index: int) -> StepResult:
    expected = step.get("expected")
    if not expected:
        return StepResult(index=index, passed=True)
    diffs: list[str] = []
    if "status" in expected and entry["response"]["status"] != expected["status"]:
        diffs.append(f"status: expected {expected['status']}, got {entry['response']['status']}")
    body_expectations = expected.get("body") or {}
    if body_expectations:
        try:
            body = json.loads(entry["response"]["body"])
        except json.JSONDecodeError:
            body = None
        for path, want in body_expectations.items():
            got = _lookup_path(body, path)
            if got != want:
                diffs.append(f"body.{path}: expected {want!r}, got {got!r}")
    return StepResult(index=index, passed=not diffs, diffs=diffs)


# ---------------------------------------------------------------------------
# Run / replay
# ---------------------------------------------------------------------------


def run_scenario(scenario: dict | str | Path, gateway: Gateway, clock: VirtualClock) -> ScenarioOutcome:
    """Execute a scenario against a gateway driven by the given virtual clock."""
    doc = load_scenario(scenario)
    entries: list[dict] = []
    results: list[StepResult] = []

    steps = doc["steps"]
    index = 0
    while index < len(steps):
        group = steps[index].get("parallel_group")
        if group:
            batch = []
            while index < len(steps) and steps[index].get("parallel_group") == group:
                batch.append((index, steps[index]))
                index += 1
        else:
            batch = [(index, steps[index])]
            index += 1

        advance = max((float(step.get("advance_seconds", 0)) for _, step in batch), default=0.0)
        if advance:
            clock.advance(advance)
        timestamp = clock.now()
        requests = [(i, step, _step_request(step, gateway, clock)) for i, step in batch]
        if len(requests) == 1:
            i, step, request = requests[0]
            responses = [(i, step, request, gateway.handle(request))]
        else:
            with ThreadPoolExecutor(max_workers=len(requests)) as pool:
                futures = [(i, step, req, pool.submit(gateway.handle, req)) for i, step, req in requests]
            responses = [(i, step, req, fut.result()) for i, step, req, fut in futures]

        batch_entries = []
        for i, step, request, response in responses:
            entry = _snapshot_entry(request, response, timestamp)
            batch_entries.append((i, step, entry))
        if len(batch_entries) > 1:
            # Digest-ordered for determinism across thread interleavings.
            batch_entries.sort(key=lambda item: transcript_digest([item[2]]))
        for i, step, entry in batch_entries:
            entries.append(entry)
            results.append(_check_expectations(step, entry, i))

    summary_metrics = gateway.metrics.snapshot()
    cache_counts = {"hits": 0, "misses": 0}
    for record in gateway.audit.records():
        if record.cache.value == "Hit":
            cache_counts["hits"] += 1
        elif record.cache.value == "Miss":
            cache_counts["misses"] += 1
    trace = {
        "scenario": doc.get("name", "unnamed"),
        "seed": doc.get("seed", 0),
        "base_time": doc.get("base_time", DEFAULT_BASE_TIME),
        "config_digest": gateway.config.config_digest,
        "entries": entries,
        "transcript_digest": transcript_digest(entries),
        "summary": {
            "metrics": summary_metrics,
            "alerts": [
                {
                    "rule": a.rule.value,
                    "subject": a.subject,
                    "window_start": a.window_start,
                    "observed": a.observed,
                    "triggered_at": a.triggered_at,
                }
                for a in gateway.detector.alerts()
            ],
            "cache": cache_counts,
            "expectations": {
                "total": len(results),
                "failed": [{"step": r.index, "diffs": r.diffs} for r in results if not r.passed],
            },
        },
    }
    return ScenarioOutcome(trace=trace, results=results)


def load_trace(source: str | Path | dict) -> dict:
    """Load a trace and re-verify its transcript digest."""
    doc = source if isinstance(source, dict) else json.loads(Path(source).read_text(encoding="utf-8"))
    entries = doc.get("entries")
    if not isinstance(entries, list):
        raise TraceIntegrityError("trace has no entries list")
    recomputed = transcript_digest(entries)
    if recomputed != doc.get("transcript_digest"):
        raise TraceIntegrityError(
            f"transcript digest mismatch: stored {doc.get('transcript_digest')}, recomputed {recomputed}"
        )
    return doc


def _first_divergence(recorded: dict, actual: dict) -> str | None:
    if recorded["status"] != actual["status"]:
        return "status"
    for name in TRACKED_HEADERS:
        if recorded["headers"].get(name) != actual["headers"].get(name):
            return f"headers.{name}"
    if recorded["body"] == actual["body"]:
        return None
    try:
        recorded_body = json.loads(recorded["body"])
        actual_body = json.loads(actual["body"])
    except json.JSONDecodeError:
        return "body"
    return "body" + (_tree_divergence(recorded_body, actual_body) or "")


def _tree_divergence(a, b, path: str = "") -> str | None:
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            if key not in a or key not in b:
                return f"{path}.{key}"
            sub = _tree_divergence(a[key], b[key], f"{path}.{key}")
            if sub:
                return sub
        return None
    if isinstance(a, list) and isinstance(b, list):
        for i, (x, y) in enumerate(zip(a, b)):
            sub = _tree_divergence(x, y, f"{path}[{i}]")
            if sub:
                return sub
        if len(a) != len(b):
            return f"{path}[{min(len(a), len(b))}]"
        return None
    if a != b:
        return path or "."
    return None


def replay(trace: dict | str | Path, gateway: Gateway, clock: VirtualClock) -> ReplayReport:
    """Re-issue a recorded trace against an identically configured gateway."""
    doc = load_trace(trace)
    if doc.get("config_digest") != gateway.config.config_digest:
        raise ConfigMismatch(
            f"trace recorded against config {doc.get('config_digest')}, "
            f"gateway has {gateway.config.config_digest}"
        )
    diverged: list[dict] = []
    replayed_entries: list[dict] = []
    for index, entry in enumerate(doc["entries"]):
        clock.set_time(entry["virtual_timestamp"])
        req = entry["request"]
        request = GatewayRequest(
            method=req["method"],
            path=req["path"],
            headers=req["headers"],
            body=req["body"].encode("utf-8"),
            client_address=req.get("client_address", "10.0.0.1"),
        )
        response = gateway.handle(request)
        replayed = _snapshot_entry(request, response, entry["virtual_timestamp"])
        replayed_entries.append(replayed)
        path = _first_divergence(entry["response"], replayed["response"])
        if path is not None:
            diverged.append(
                {
                    "step": index,
                    "path": path,
                    "recorded": entry["response"],
                    "actual": replayed["response"],
                }
            )
    replayed_digest = transcript_digest(replayed_entries)
    return ReplayReport(
        matched=not diverged and replayed_digest == doc["transcript_digest"],
        diverged=diverged,
        recorded_digest=doc["transcript_digest"],
        replayed_digest=replayed_digest,
    )


# ---------------------------------------------------------------------------
# Templates and reports
# ---------------------------------------------------------------------------


def generate_templates(discovery: dict) -> list[dict]:
    """One ready-made template per discovered intent; every template parses."""
    templates = []
    for entry in discovery.get("intents", []):
        text = entry["example_query"]
        aql.parse(text)  # synthesis bug would surface here, not at the agent
        placeholders = {
            p["name"]: f"replace with a {p['type']} value"
            for p in entry["params"]
            if p["required"]
        }
        templates.append(
            {
                "intent": entry["name"],
                "template": text,
                "required_headers": {
                    "X-Agent-Type": "AI",
                    "X-Agent-Intent": entry["name"],
                },
                "placeholders": placeholders,
            }
        )
    return templates


def report_from_trace(trace: dict | str | Path) -> dict:
    doc = load_trace(trace)
    summary = doc.get("summary") or {}
    return _shape_report(
        scenario=doc.get("scenario"),
        metrics=summary.get("metrics") or {"intents": {}, "totals": {}},
        alerts=summary.get("alerts") or [],
        cache=summary.get("cache") or {"hits": 0, "misses": 0},
    )


def report_from_gateway(gateway: Gateway) -> dict:
    cache = {"hits": 0, "misses": 0}
    for record in gateway.audit.records():
        if record.cache.value == "Hit":
            cache["hits"] += 1
        elif record.cache.value == "Miss":
            cache["misses"] += 1
    return _shape_report(
        scenario=None,
        metrics=gateway.metrics.snapshot(),
        alerts=gateway.metrics_document()["alerts"],
        cache=cache,
    )


def _shape_report(scenario, metrics, alerts, cache) -> dict:
    lookups = cache["hits"] + cache["misses"]
    return {
        "scenario": scenario,
        "intents": metrics.get("intents", {}),
        "totals": metrics.get("totals", {}),
        "cache_hit_ratio": cache["hits"] / lookups if lookups else 0.0,
        "cache": cache,
        "alerts": alerts,
    }


def render_report(report: dict) -> str:
    lines = []
    if report.get("scenario"):
        lines.append(f"scenario: {report['scenario']}")
    lines.append("intent                success_rate  error_freq  attempts  cache_hits")
    for name, stats in sorted(report["intents"].items()):
        lines.append(
            f"{name:<22}{stats['success_rate']:>11.2f}{stats['error_frequency']:>12.2f}"
            f"{stats['attempts']:>10}{stats['cache_hits']:>12}"
        )
    if not report["intents"]:
        lines.append("(no intent traffic)")
    lines.append(f"cache hit ratio: {report['cache_hit_ratio']:.2f}")
    if report["alerts"]:
        lines.append("alerts:")
        for alert in report["alerts"]:
            lines.append(
                f"  {alert['rule']} subject={alert['subject']} observed={alert['observed']}"
                f" at t={alert['triggered_at']}"
            )
    else:
        lines.append("alerts: none")
    return "\n".join(lines)
