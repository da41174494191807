import random

import pytest

from agentgate.observability import (
    AnomalyAlert,
    AnomalyDetector,
    AnomalyRule,
    AuditLog,
    AuditRecord,
    CacheStatus,
    Decision,
    JsonlSink,
    MemorySink,
    MetricsCounters,
    RuleKind,
    SinkUnavailable,
)


def rec(decision=Decision.OK, t=0.0, agent="bot-1", intent="Ping", cache=CacheStatus.BYPASS):
    return AuditRecord(
        timestamp=t,
        decision=decision,
        cache=cache,
        agent_id=agent,
        agent_type="AI",
        role="support",
        intent=intent,
        params_digest="d" * 64,
        client_address="10.0.0.1",
    )


class TestAuditLog:
    def test_sequences_strictly_increase(self):
        log = AuditLog()
        first = log.append(rec())
        second = log.append(rec())
        assert (first, second) == (1, 2)

    def test_denied_request_present(self):
        log = AuditLog()
        log.append(rec(decision=Decision.DENIED_SCOPE))
        assert log.records()[-1].decision is Decision.DENIED_SCOPE

    def test_jsonl_round_trip_byte_identical(self, tmp_path):
        path = tmp_path / "audit.jsonl"
        log = AuditLog(sink=JsonlSink(path))
        log.append(rec(decision=Decision.OK, t=12.5))
        line = path.read_text().strip()
        parsed = AuditRecord.from_json(line)
        assert parsed.to_json() == line

    def test_write_ahead_to_sink(self):
        sink = MemorySink()
        log = AuditLog(sink=sink)
        log.append(rec())
        assert len(sink.lines) == 1

    def test_sink_failure_propagates(self, tmp_path):
        class BrokenSink:
            def append(self, line):
                raise SinkUnavailable("disk gone")

        log = AuditLog(sink=BrokenSink())
        with pytest.raises(SinkUnavailable):
            log.append(rec())

    def test_alert_lines_share_stream(self):
        sink = MemorySink()
        log = AuditLog(sink=sink)
        log.append_alert(
            AnomalyAlert(RuleKind.UNAUTHORIZED_BURST, "bot-1", window_start=0.0, observed=3, triggered_at=20.0)
        )
        assert '"kind":"alert"' in sink.lines[0]


class TestDetector:
    RULES = (AnomalyRule(RuleKind.UNAUTHORIZED_BURST, threshold=3, window_seconds=60),)

    def test_burst_alerts_once_at_threshold(self):
        detector = AnomalyDetector(rules=self.RULES)
        alerts = []
        for t in (0.0, 10.0, 20.0):
            alerts += detector.detect(rec(decision=Decision.DENIED_SCOPE, t=t), now=t)
        assert len(alerts) == 1
        assert alerts[0].triggered_at == 20.0
        assert alerts[0].observed == 3
        assert alerts[0].window_start == 0.0

    def test_dedup_within_window(self):
        detector = AnomalyDetector(rules=self.RULES)
        for t in (0.0, 10.0, 20.0):
            detector.detect(rec(decision=Decision.DENIED_SCOPE, t=t), now=t)
        more = detector.detect(rec(decision=Decision.DENIED_SCOPE, t=25.0), now=25.0)
        assert more == []

    def test_spread_events_never_alert(self):
        detector = AnomalyDetector(rules=self.RULES)
        out = []
        for t in (0.0, 60.0, 120.0):
            out += detector.detect(rec(decision=Decision.DENIED_SCOPE, t=t), now=t)
        assert out == []

    def test_new_burst_after_window_slides_past(self):
        detector = AnomalyDetector(rules=self.RULES)
        for t in (0.0, 10.0, 20.0):
            detector.detect(rec(decision=Decision.DENIED_SCOPE, t=t), now=t)
        # Previous alert at t=20; window slides past at t >= 80.
        out = []
        for t in (81.0, 82.0, 83.0):
            out += detector.detect(rec(decision=Decision.DENIED_SCOPE, t=t), now=t)
        assert len(out) == 1
        assert out[0].triggered_at == 83.0

    def test_subjects_isolated(self):
        detector = AnomalyDetector(rules=self.RULES)
        out = []
        for agent in ("a", "b", "c"):
            out += detector.detect(rec(decision=Decision.DENIED_SCOPE, agent=agent), now=0.0)
        assert out == []

    def test_rate_limit_streak_rule(self):
        detector = AnomalyDetector(rules=(AnomalyRule(RuleKind.RATE_LIMIT_STREAK, 2, 60),))
        out = []
        for t in (0.0, 1.0):
            out += detector.detect(rec(decision=Decision.RATE_LIMITED, t=t), now=t)
        assert [a.rule for a in out] == [RuleKind.RATE_LIMIT_STREAK]

    def test_excessive_retries_counts_upstream_errors(self):
        detector = AnomalyDetector(rules=(AnomalyRule(RuleKind.EXCESSIVE_RETRIES, 2, 60),))
        out = []
        for t in (0.0, 1.0):
            out += detector.detect(rec(decision=Decision.UPSTREAM_ERROR, t=t), now=t)
        assert len(out) == 1

    def test_callback_invoked(self):
        seen = []
        detector = AnomalyDetector(rules=self.RULES, on_alert=seen.append)
        for t in (0.0, 1.0, 2.0):
            detector.detect(rec(decision=Decision.DENIED_SCOPE, t=t), now=t)
        assert len(seen) == 1

    def test_subject_falls_back_to_address(self):
        record = AuditRecord(
            timestamp=0.0,
            decision=Decision.DENIED_SCOPE,
            agent_id=None,
            client_address="10.9.9.9",
        )
        assert record.subject_key == "10.9.9.9"


def brute_force_alerts(events, rules):
    """Naive O(n^2) oracle: for every event, recount the window over the
    arrival prefix and apply the dedup rule from first principles."""
    alerts = []
    for i, (kind, subject, now) in enumerate(events):
        for rule in rules:
            if rule.kind is not kind:
                continue
            history = [
                t
                for k, s, t in events[: i + 1]
                if k is kind and s == subject and now - rule.window_seconds < t <= now
            ]
            count = len(history)
            prior = [
                a
                for a in alerts
                if a[0] is kind and a[1] == subject and a[2] > now - rule.window_seconds
            ]
            if count >= rule.threshold and not prior:
                alerts.append((kind, subject, now, count))
    return alerts


class TestDetectorOracleEquivalence:
    def run_stream(self, seed):
        rng = random.Random(seed)
        rules = (
            AnomalyRule(RuleKind.UNAUTHORIZED_BURST, threshold=rng.randint(1, 4), window_seconds=rng.randint(5, 60)),
            AnomalyRule(RuleKind.RATE_LIMIT_STREAK, threshold=rng.randint(2, 6), window_seconds=rng.randint(5, 60)),
        )
        detector = AnomalyDetector(rules=rules)
        decisions = {
            RuleKind.UNAUTHORIZED_BURST: Decision.DENIED_SCOPE,
            RuleKind.RATE_LIMIT_STREAK: Decision.RATE_LIMITED,
        }
        events = []
        t = 0.0
        observed = []
        for _ in range(rng.randint(5, 60)):
            t += rng.choice([0.0, 1.0, 2.0, 5.0, 13.0, 31.0, 61.0])
            kind = rng.choice([RuleKind.UNAUTHORIZED_BURST, RuleKind.RATE_LIMIT_STREAK])
            subject = rng.choice(["a", "b"])
            events.append((kind, subject, t))
            for alert in detector.detect(rec(decision=decisions[kind], agent=subject, t=t), now=t):
                observed.append((alert.rule, alert.subject, alert.triggered_at, alert.observed))
        expected = brute_force_alerts(events, rules)
        assert observed == expected, f"seed {seed}: {observed} != {expected}"

    def test_oracle_equivalence_on_random_streams(self):
        for seed in range(300):
            self.run_stream(seed)


class TestMetrics:
    def test_success_rate(self):
        metrics = MetricsCounters()
        for _ in range(3):
            metrics.observe(rec(decision=Decision.OK))
        metrics.observe(rec(decision=Decision.UPSTREAM_ERROR))
        snap = metrics.snapshot()["intents"]["Ping"]
        assert snap["attempts"] == 4
        assert snap["success_rate"] == pytest.approx(0.75)
        assert snap["error_frequency"] == pytest.approx(0.25)

    def test_no_traffic_all_zero(self):
        snap = MetricsCounters().snapshot()
        assert snap["intents"] == {}
        assert snap["totals"]["attempts"] == 0
        assert snap["totals"]["success_rate"] == 0.0

    def test_denial_not_error(self):
        metrics = MetricsCounters()
        metrics.observe(rec(decision=Decision.DENIED_SCOPE))
        snap = metrics.snapshot()["intents"]["Ping"]
        assert snap["denials"] == 1
        assert snap["errors"] == 0

    def test_cache_hits_counted(self):
        metrics = MetricsCounters()
        metrics.observe(rec(decision=Decision.OK, cache=CacheStatus.HIT))
        metrics.observe(rec(decision=Decision.OK, cache=CacheStatus.MISS))
        assert metrics.snapshot()["intents"]["Ping"]["cache_hits"] == 1

    def test_intentless_records_ignored(self):
        metrics = MetricsCounters()
        metrics.observe(rec(intent=None))
        assert metrics.snapshot()["totals"]["attempts"] == 0
