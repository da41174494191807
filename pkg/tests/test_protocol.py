import base64
import hashlib
import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from agentgate import protocol
from agentgate.protocol import (
    AgentIdentity,
    AgentType,
    BadSignature,
    ClaimSet,
    DuplicateHeader,
    ErrorRecovery,
    Expired,
    InvalidClaims,
    Malformed,
    MalformedIntent,
    ResponseMetadata,
    UnknownAgentType,
    emit_response_metadata,
    encode_claim_token,
    parse_agent_headers,
    parse_response_metadata,
    verify_claim_token,
)

KEY = b"k3y-fixture"
CLAIMS = ClaimSet(
    subject="agent-7",
    is_agent=True,
    role="support",
    scopes=frozenset({"order:read", "profile:update"}),
    issued_at=1_700_000_000,
    expires_at=1_700_003_600,
)
GOLDEN = Path(__file__).parent / "data" / "claim_token.golden"


class TestParseAgentHeaders:
    def test_ai_with_intent(self):
        identity = parse_agent_headers({"X-Agent-Type": "AI", "X-Agent-Intent": "OrderStatusCheck"})
        assert identity.agent_type is AgentType.AI
        assert identity.intent == "OrderStatusCheck"
        assert identity.verified_claims is None

    def test_empty_headers_default_to_human(self):
        identity = parse_agent_headers({})
        assert identity == AgentIdentity(agent_type=AgentType.HUMAN)

    def test_unknown_agent_type(self):
        with pytest.raises(UnknownAgentType):
            parse_agent_headers({"X-Agent-Type": "robot"})

    @pytest.mark.parametrize("value,expected", [("ai", AgentType.AI), ("Human", AgentType.HUMAN), ("HUMAN", AgentType.HUMAN)])
    def test_agent_type_case_insensitive(self, value, expected):
        assert parse_agent_headers({"X-Agent-Type": value}).agent_type is expected

    def test_header_names_case_insensitive(self):
        identity = parse_agent_headers({"x-agent-type": "AI", "X-CONTEXT-ID": "ctx-1"})
        assert identity.agent_type is AgentType.AI
        assert identity.context_id == "ctx-1"

    def test_duplicate_header_rejected(self):
        with pytest.raises(DuplicateHeader):
            parse_agent_headers([("X-Agent-Type", "AI"), ("x-agent-type", "human")])

    @pytest.mark.parametrize("bad", ["9starts-with-digit", "has space", "dash-y", ""])
    def test_malformed_intent(self, bad):
        if bad == "":
            # Empty value is treated as absent, not malformed.
            assert parse_agent_headers({"X-Agent-Intent": bad}).intent is None
        else:
            with pytest.raises(MalformedIntent):
                parse_agent_headers({"X-Agent-Intent": bad})

    def test_all_fields(self):
        identity = parse_agent_headers(
            {
                "X-Agent-Type": "AI",
                "X-Agent-Intent": "Ping",
                "X-Agent-Role": "support",
                "X-Agent-Id": "bot-1",
                "X-Context-Id": "c-9",
            }
        )
        assert identity.role == "support"
        assert identity.agent_id == "bot-1"
        assert identity.context_id == "c-9"

    def test_unrecognized_headers_ignored(self):
        identity = parse_agent_headers({"Content-Type": "application/json", "X-Whatever": "1"})
        assert identity.agent_type is AgentType.HUMAN

    def test_parsing_is_pure(self):
        headers = {"X-Agent-Type": "AI", "X-Agent-Intent": "Ping"}
        assert parse_agent_headers(headers) == parse_agent_headers(headers)


class TestClaimTokens:
    def test_round_trip(self):
        token = encode_claim_token(CLAIMS, KEY)
        assert verify_claim_token(token, KEY, now=1_700_000_100) == CLAIMS

    def test_deterministic(self):
        assert encode_claim_token(CLAIMS, KEY) == encode_claim_token(CLAIMS, KEY)

    def test_golden_token(self):
        # Frozen from an independent RFC 2104 HMAC-SHA256 implementation.
        assert encode_claim_token(CLAIMS, KEY) == GOLDEN.read_text().strip()

    def test_tampered_signature_rejected(self):
        token = encode_claim_token(CLAIMS, KEY)
        seg1, seg2 = token.split(".")
        raw = bytearray(base64.urlsafe_b64decode(seg2 + "=" * (-len(seg2) % 4)))
        raw[0] ^= 0x01
        tampered = seg1 + "." + base64.urlsafe_b64encode(bytes(raw)).decode().rstrip("=")
        with pytest.raises(BadSignature):
            verify_claim_token(tampered, KEY, now=1_700_000_100)

    def test_every_single_byte_mutation_rejected(self):
        token = encode_claim_token(CLAIMS, KEY)
        for i in range(len(token)):
            flipped = token[:i] + chr(ord(token[i]) ^ 0x02) + token[i + 1 :]
            if flipped == token:
                continue
            with pytest.raises((BadSignature, Malformed)):
                verify_claim_token(flipped, KEY, now=1_700_000_100)

    def test_expiry_boundary_exclusive(self):
        token = encode_claim_token(CLAIMS, KEY)
        with pytest.raises(Expired):
            verify_claim_token(token, KEY, now=CLAIMS.expires_at)
        assert verify_claim_token(token, KEY, now=CLAIMS.expires_at - 1) == CLAIMS

    def test_not_yet_valid(self):
        token = encode_claim_token(CLAIMS, KEY)
        with pytest.raises(Expired):
            verify_claim_token(token, KEY, now=CLAIMS.issued_at - 1)

    def test_wrong_key(self):
        token = encode_claim_token(CLAIMS, KEY)
        with pytest.raises(BadSignature):
            verify_claim_token(token, b"other", now=1_700_000_100)

    @pytest.mark.parametrize("junk", ["", "onesegment", "a.b.c", ".", "x.", ".y", "!!!.???"])
    def test_malformed_tokens(self, junk):
        with pytest.raises(Malformed):
            verify_claim_token(junk, KEY, now=0)

    def test_empty_key_rejected(self):
        with pytest.raises(InvalidClaims):
            encode_claim_token(CLAIMS, b"")

    def test_invalid_claims_rejected(self):
        with pytest.raises(InvalidClaims):
            ClaimSet("s", True, "r", frozenset(), issued_at=10, expires_at=10)
        with pytest.raises(InvalidClaims):
            ClaimSet("s", True, "r", frozenset({"NotAScope"}), issued_at=0, expires_at=1)

    def test_signature_covers_claim_document(self):
        # Splicing the document segment from one token onto another's
        # signature must fail.
        other = ClaimSet("agent-8", True, "support", frozenset(), 1_700_000_000, 1_700_003_600)
        t1 = encode_claim_token(CLAIMS, KEY)
        t2 = encode_claim_token(other, KEY)
        spliced = t2.split(".")[0] + "." + t1.split(".")[1]
        with pytest.raises(BadSignature):
            verify_claim_token(spliced, KEY, now=1_700_000_100)


class TestResponseMetadata:
    def test_retry_after_header_format(self):
        meta = ResponseMetadata(error_recovery=ErrorRecovery(retry_after_seconds=60))
        assert emit_response_metadata(meta) == {"X-Error-Recovery": "RetryAfter=60s"}

    def test_empty_metadata(self):
        assert emit_response_metadata(ResponseMetadata()) == {}

    def test_rate_fields(self):
        meta = ResponseMetadata(rate_limit_limit=10, rate_limit_remaining=7)
        headers = emit_response_metadata(meta)
        assert headers == {"X-RateLimit-Limit": "10", "X-RateLimit-Remaining": "7"}

    def test_remaining_exceeding_limit_rejected(self):
        with pytest.raises(ValueError):
            ResponseMetadata(rate_limit_limit=5, rate_limit_remaining=6)

    def test_bad_recovery_value_rejected_on_parse(self):
        with pytest.raises(ValueError):
            parse_response_metadata({"X-Error-Recovery": "soon"})


scalars = st.integers(min_value=0, max_value=10_000)
metadata_strategy = st.builds(
    ResponseMetadata,
    data_last_updated=st.one_of(st.none(), st.just("2025-01-10T08:30:00Z")),
    rate_limit_limit=st.one_of(st.none(), st.integers(min_value=100, max_value=10_000)),
    rate_limit_remaining=st.one_of(st.none(), st.integers(min_value=0, max_value=100)),
    error_recovery=st.one_of(st.none(), st.builds(ErrorRecovery, retry_after_seconds=st.integers(1, 3600))),
)

claims_strategy = st.builds(
    ClaimSet,
    subject=st.text(min_size=1, max_size=12),
    is_agent=st.booleans(),
    role=st.sampled_from(["support", "analytics", "order-processing"]),
    scopes=st.frozensets(st.sampled_from(["order:read", "order:write", "profile:read", "profile:update"]), max_size=4),
    issued_at=st.integers(min_value=0, max_value=2_000_000_000),
    expires_at=st.integers(min_value=2_000_000_001, max_value=3_000_000_000),
)


class TestProperties:
    @given(metadata_strategy)
    def test_metadata_round_trip(self, meta):
        assert parse_response_metadata(emit_response_metadata(meta)) == meta

    @given(claims_strategy, st.binary(min_size=1, max_size=32))
    def test_token_round_trip(self, claims, key):
        token = encode_claim_token(claims, key)
        assert verify_claim_token(token, key, now=claims.issued_at) == claims

    @given(claims_strategy)
    def test_canonical_document_is_sorted_compact_json(self, claims):
        token = encode_claim_token(claims, b"k")
        seg1 = token.split(".")[0]
        doc = base64.urlsafe_b64decode(seg1 + "=" * (-len(seg1) % 4))
        parsed = json.loads(doc)
        assert doc == json.dumps(parsed, sort_keys=True, separators=(",", ":")).encode()


def test_golden_matches_recomputed_independent_hmac():
    """Recompute the golden with RFC 2104 arithmetic (no hmac module)."""
    block = 64
    key = KEY.ljust(block, b"\x00")
    ipad = bytes(b ^ 0x36 for b in key)
    opad = bytes(b ^ 0x5C for b in key)
    seg1 = GOLDEN.read_text().strip().split(".")[0]
    inner = hashlib.sha256(ipad + seg1.encode("ascii")).digest()
    mac = hashlib.sha256(opad + inner).digest()
    expected = base64.urlsafe_b64encode(mac).decode().rstrip("=")
    assert GOLDEN.read_text().strip().split(".")[1] == expected
