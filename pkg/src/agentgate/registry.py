"""Intent catalog: declarative specs, lookup, and the discovery document.

The registry is loaded once from a JSON document (schema in
schemas/registry.schema.json) and is immutable afterwards. Lookup is
exact-match and case-sensitive — no fuzzy matching, so a near-miss intent
name is an error carrying the full sorted catalog rather than a silent
misroute.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum

from . import aql
from .protocol import HEADER_CATALOG, INTENT_TOKEN_RE, SCOPE_RE

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z][A-Za-z0-9_]*)\}")
_PARAM_TYPES = ("string", "integer", "boolean")

DISCOVERY_VERSION = "1"

_EXAMPLE_VALUES = {"string": "example", "integer": 1, "boolean": True}


class PriorityClass(Enum):
    INTERACTIVE = "Interactive"
    STANDARD = "Standard"
    BATCH = "Batch"

    @property
    def level(self) -> int:
        return {"Interactive": 0, "Standard": 1, "Batch": 2}[self.value]


class ConfigError(Exception):
    """Registry document rejected; `path` locates the offending element."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class UnknownIntent(Exception):
    """Lookup miss; carries the sorted known-intent list for correction."""

    def __init__(self, name: str, known: list[str]):
        self.name = name
        self.known = known
        super().__init__(f"unknown intent {name!r}; known intents: {', '.join(known)}")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str  # "string" | "integer" | "boolean"
    required: bool

    def matches(self, value: aql.Scalar) -> bool:
        if self.type == "string":
            return isinstance(value, str)
        if self.type == "integer":
            return isinstance(value, int) and not isinstance(value, bool)
        return isinstance(value, bool)


@dataclass(frozen=True)
class PlanStep:
    upstream: str
    path_template: str
    merge_key: str | None = None

    def placeholders(self) -> list[str]:
        return _PLACEHOLDER_RE.findall(self.path_template)


@dataclass(frozen=True)
class UpstreamPlan:
    steps: tuple[PlanStep, ...]


@dataclass(frozen=True)
class IntentSpec:
    name: str
    params: tuple[ParamSpec, ...]
    required_scopes: frozenset[str]
    consent_categories: frozenset[str]
    mutation: bool
    resource_tags: frozenset[str]
    cache_ttl_seconds: int | None  # None -> gateway default; 0 -> uncacheable
    priority_class: PriorityClass
    plan: UpstreamPlan
    result_schema: dict
    context_sensitive: bool = False

    def param(self, name: str) -> ParamSpec | None:
        for p in self.params:
            if p.name == name:
                return p
        return None

    def required_params(self) -> list[ParamSpec]:
        return [p for p in self.params if p.required]


@dataclass(frozen=True)
class IntentRegistry:
    intents: dict[str, IntentSpec] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.intents)

    def names(self) -> list[str]:
        return sorted(self.intents)

    def consent_categories(self) -> frozenset[str]:
        out: set[str] = set()
        for spec in self.intents.values():
            out |= spec.consent_categories
        return frozenset(out)

    def upstream_names(self) -> frozenset[str]:
        return frozenset(
            step.upstream for spec in self.intents.values() for step in spec.plan.steps
        )


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _require(value, kind, path: str, what: str):
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(path, f"{what} must be {getattr(kind, '__name__', kind)}")
    return value


def _load_schema_tree(node, path: str) -> dict:
    _require(node, dict, path, "result_schema node")
    out = {}
    for name, child in node.items():
        if not INTENT_TOKEN_RE.match(name):
            raise ConfigError(f"{path}.{name}", "field name fails token grammar")
        out[name] = _load_schema_tree(child, f"{path}.{name}") if child else {}
    return out


def _load_intent(doc: dict, path: str) -> IntentSpec:
    _require(doc, dict, path, "intent")
    name = _require(doc.get("name"), str, f"{path}.name", "name")
    if not INTENT_TOKEN_RE.match(name):
        raise ConfigError(f"{path}.name", f"intent name {name!r} fails token grammar")

    params: list[ParamSpec] = []
    seen_params: set[str] = set()
    for i, raw in enumerate(_require(doc.get("params", []), list, f"{path}.params", "params")):
        p_path = f"{path}.params[{i}]"
        _require(raw, dict, p_path, "param")
        p_name = _require(raw.get("name"), str, f"{p_path}.name", "param name")
        if not INTENT_TOKEN_RE.match(p_name):
            raise ConfigError(f"{p_path}.name", f"param name {p_name!r} fails token grammar")
        if p_name in seen_params:
            raise ConfigError(f"{p_path}.name", f"duplicate param {p_name!r}")
        seen_params.add(p_name)
        p_type = _require(raw.get("type"), str, f"{p_path}.type", "param type")
        if p_type not in _PARAM_TYPES:
            raise ConfigError(f"{p_path}.type", f"type must be one of {_PARAM_TYPES}")
        params.append(ParamSpec(name=p_name, type=p_type, required=bool(raw.get("required", False))))

    scopes = set()
    for i, scope in enumerate(doc.get("required_scopes", [])):
        if not isinstance(scope, str) or not SCOPE_RE.match(scope):
            raise ConfigError(f"{path}.required_scopes[{i}]", f"bad scope {scope!r}")
        scopes.add(scope)

    mutation = bool(doc.get("mutation", False))
    ttl = doc.get("cache_ttl_seconds")
    if ttl is not None:
        _require(ttl, int, f"{path}.cache_ttl_seconds", "cache_ttl_seconds")
        if ttl < 0:
            raise ConfigError(f"{path}.cache_ttl_seconds", "must be non-negative")
        if mutation and ttl != 0:
            raise ConfigError(f"{path}.cache_ttl_seconds", "mutation intents must not be cacheable")
    elif mutation:
        ttl = 0

    raw_priority = doc.get("priority_class", "Standard")
    try:
        priority = PriorityClass(raw_priority)
    except ValueError:
        raise ConfigError(f"{path}.priority_class", f"unknown class {raw_priority!r}") from None

    plan_doc = _require(doc.get("plan"), dict, f"{path}.plan", "plan")
    raw_steps = _require(plan_doc.get("steps"), list, f"{path}.plan.steps", "steps")
    if not raw_steps:
        raise ConfigError(f"{path}.plan.steps", "plan needs at least one step")
    steps: list[PlanStep] = []
    merge_keys: set[str] = set()
    for i, raw in enumerate(raw_steps):
        s_path = f"{path}.plan.steps[{i}]"
        _require(raw, dict, s_path, "step")
        step = PlanStep(
            upstream=_require(raw.get("upstream"), str, f"{s_path}.upstream", "upstream"),
            path_template=_require(raw.get("path_template"), str, f"{s_path}.path_template", "path_template"),
            merge_key=raw.get("merge_key"),
        )
        for placeholder in step.placeholders():
            if placeholder not in seen_params:
                raise ConfigError(
                    f"{s_path}.path_template", f"placeholder {{{placeholder}}} references no declared param"
                )
        if len(raw_steps) > 1:
            if not step.merge_key:
                raise ConfigError(f"{s_path}.merge_key", "multi-step plans require a merge_key per step")
            if step.merge_key in merge_keys:
                raise ConfigError(f"{s_path}.merge_key", f"duplicate merge_key {step.merge_key!r}")
            merge_keys.add(step.merge_key)
        steps.append(step)

    def _name_set(key: str) -> frozenset[str]:
        raw_list = _require(doc.get(key, []), list, f"{path}.{key}", key)
        for i, item in enumerate(raw_list):
            if not isinstance(item, str) or not item:
                raise ConfigError(f"{path}.{key}[{i}]", "must be a non-empty string")
        return frozenset(raw_list)

    return IntentSpec(
        name=name,
        params=tuple(params),
        required_scopes=frozenset(scopes),
        consent_categories=_name_set("consent_categories"),
        mutation=mutation,
        resource_tags=_name_set("resource_tags"),
        cache_ttl_seconds=ttl,
        priority_class=priority,
        plan=UpstreamPlan(steps=tuple(steps)),
        result_schema=_load_schema_tree(doc.get("result_schema", {}), f"{path}.result_schema"),
        context_sensitive=bool(doc.get("context_sensitive", False)),
    )


def load_registry(config: str) -> IntentRegistry:
    """Parse and validate a registry document; total over arbitrary text."""
    try:
        doc = json.loads(config)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"not valid JSON: {exc}") from exc
    _require(doc, dict, "$", "registry document")
    raw_intents = _require(doc.get("intents"), list, "$.intents", "intents")

    intents: dict[str, IntentSpec] = {}
    for i, raw in enumerate(raw_intents):
        spec = _load_intent(raw, f"$.intents[{i}]")
        if spec.name in intents:
            raise ConfigError(f"$.intents[{i}].name", f"duplicate intent {spec.name!r}")
        intents[spec.name] = spec
    return IntentRegistry(intents=intents)


def resolve(registry: IntentRegistry, intent_name: str) -> IntentSpec:
    """Exact, case-sensitive lookup; UnknownIntent lists the catalog."""
    spec = registry.intents.get(intent_name)
    if spec is None:
        raise UnknownIntent(intent_name, registry.names())
    return spec


# ---------------------------------------------------------------------------
# Discovery
# ---------------------------------------------------------------------------


def example_query(spec: IntentSpec) -> str:
    """Synthesize a runnable example: required params with type-default
    placeholders and the full top-level selection."""
    args = tuple((p.name, _EXAMPLE_VALUES[p.type]) for p in spec.required_params())
    selection = None
    if spec.result_schema:
        selection = tuple(aql.SelectionNode(field=name) for name in spec.result_schema)
    return aql.print_query(aql.AqlQuery(intent=spec.name, args=args, selection=selection))


def build_discovery(registry: IntentRegistry, default_ttl_seconds: int = 0) -> dict:
    """Deterministic machine-readable catalog (intents sorted by name)."""
    intents = []
    for name in registry.names():
        spec = registry.intents[name]
        ttl = spec.cache_ttl_seconds
        if ttl is None:
            ttl = 0 if spec.mutation else default_ttl_seconds
        intents.append(
            {
                "name": spec.name,
                "params": [
                    {"name": p.name, "type": p.type, "required": p.required} for p in spec.params
                ],
                "required_scopes": sorted(spec.required_scopes),
                "consent_categories": sorted(spec.consent_categories),
                "mutation": spec.mutation,
                "cache_ttl_seconds": ttl,
                "priority_class": spec.priority_class.value,
                "result_schema": spec.result_schema,
                "example_query": example_query(spec),
            }
        )
    return {
        "version": DISCOVERY_VERSION,
        "intents": intents,
        "headers": HEADER_CATALOG,
    }
