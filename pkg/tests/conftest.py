import copy
import json
from pathlib import Path

import pytest

from agentgate.clock import VirtualClock
from agentgate.gateway import Gateway, GatewayRequest
from agentgate.gateway import config as gwconfig
from agentgate.protocol import ClaimSet, encode_claim_token

PLAYBOOK = Path(__file__).resolve().parent.parent / "playbook"
BASE_TIME = 1_700_000_000.0
TOKEN_KEY = b"playbook-secret"


def deep_merge(base: dict, overrides: dict) -> dict:
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def playbook_config_doc(**overrides) -> dict:
    doc = json.loads((PLAYBOOK / "config.json").read_text())
    doc["registry"] = str(PLAYBOOK / "registry.json")
    doc["upstreams"]["orders"]["fixture"] = str(PLAYBOOK / "fixtures" / "orders.json")
    doc["upstreams"]["customers"]["fixture"] = str(PLAYBOOK / "fixtures" / "customers.json")
    return deep_merge(doc, copy.deepcopy(overrides))


def write_config(tmp_path: Path, doc: dict, name: str = "config.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return path


def build_gateway(tmp_path: Path, clock=None, **overrides) -> Gateway:
    path = write_config(tmp_path, playbook_config_doc(**overrides))
    return Gateway(gwconfig.load(path), clock=clock or VirtualClock(start=BASE_TIME))


def mint_token(
    subject="agent-7",
    role="support",
    scopes=("order:read",),
    is_agent=True,
    issued_at=int(BASE_TIME) - 10,
    ttl=7200,
    key=TOKEN_KEY,
):
    claims = ClaimSet(
        subject=subject,
        is_agent=is_agent,
        role=role,
        scopes=frozenset(scopes),
        issued_at=issued_at,
        expires_at=issued_at + ttl,
    )
    return encode_claim_token(claims, key)


def agent_headers(
    token=None,
    agent_type="AI",
    intent=None,
    role=None,
    agent_id="bot-1",
    context_id=None,
):
    headers = {}
    if agent_type:
        headers["X-Agent-Type"] = agent_type
    if intent:
        headers["X-Agent-Intent"] = intent
    if role:
        headers["X-Agent-Role"] = role
    if agent_id:
        headers["X-Agent-Id"] = agent_id
    if context_id:
        headers["X-Context-Id"] = context_id
    if token:
        headers["Authorization"] = f"Bearer {token}"
    return headers


def aql_request(text, address="10.0.0.1", **header_kwargs) -> GatewayRequest:
    return GatewayRequest(
        method="POST",
        path="/aql",
        headers=agent_headers(**header_kwargs),
        body=text.encode("utf-8"),
        client_address=address,
    )


def intent_request(path, body=None, address="10.0.0.1", **header_kwargs) -> GatewayRequest:
    raw = json.dumps(body).encode("utf-8") if body is not None else b""
    return GatewayRequest(
        method="POST",
        path=path,
        headers=agent_headers(**header_kwargs),
        body=raw,
        client_address=address,
    )


def get_request(path, address="10.0.0.1", **header_kwargs) -> GatewayRequest:
    return GatewayRequest(
        method="GET", path=path, headers=agent_headers(**header_kwargs), client_address=address
    )


@pytest.fixture
def clock():
    return VirtualClock(start=BASE_TIME)


@pytest.fixture
def gateway(tmp_path, clock):
    gw = build_gateway(tmp_path, clock=clock)
    yield gw
    gw.close()
