import json
import subprocess
import sys
from pathlib import Path

import pytest

from agentgate import adk
from agentgate.clock import VirtualClock
from agentgate.gateway import Gateway
from agentgate.gateway import config as gwconfig

from conftest import BASE_TIME, PLAYBOOK, build_gateway, playbook_config_doc, write_config

SCENARIOS = PLAYBOOK / "scenarios"


def harness(tmp_path, **overrides):
    clock = VirtualClock(start=BASE_TIME)
    gateway = build_gateway(tmp_path, clock=clock, **overrides)
    return gateway, clock


def run_playbook_scenario(tmp_path, name, **overrides):
    gateway, clock = harness(tmp_path, **overrides)
    try:
        return adk.run_scenario(SCENARIOS / name, gateway, clock)
    finally:
        gateway.close()


class TestRunScenario:
    def test_happy_path_all_expectations_pass(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "order_happy_path.json")
        assert outcome.passed, [r.diffs for r in outcome.results if not r.passed]
        assert len(outcome.trace["entries"]) == 5

    def test_deterministic_digest_across_runs(self, tmp_path):
        one = run_playbook_scenario(tmp_path, "order_happy_path.json")
        two = run_playbook_scenario(tmp_path, "order_happy_path.json")
        assert one.trace["transcript_digest"] == two.trace["transcript_digest"]

    def test_scripted_failure_expectation(self, tmp_path):
        flaky = PLAYBOOK / "fixtures" / "orders_flaky.json"
        outcome = run_playbook_scenario(
            tmp_path,
            "upstream_failure.json",
            upstreams={"orders": {"kind": "mock", "fixture": str(flaky)}},
        )
        assert outcome.passed, [r.diffs for r in outcome.results if not r.passed]

    def test_failed_expectation_carries_diff(self, tmp_path):
        scenario = {
            "name": "x",
            "seed": 1,
            "steps": [
                {
                    "profile": {"agent_type": "human"},
                    "action": {"aql": "Ping{pong}"},
                    "expected": {"status": 403, "body": {"pong": False}},
                }
            ],
        }
        gateway, clock = harness(tmp_path)
        try:
            outcome = adk.run_scenario(scenario, gateway, clock)
        finally:
            gateway.close()
        assert not outcome.passed
        diffs = outcome.results[0].diffs
        assert any("status" in d for d in diffs)
        assert any("body.pong" in d for d in diffs)

    def test_alerts_surface_in_summary(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "denied_and_alerts.json")
        assert outcome.passed
        alerts = outcome.trace["summary"]["alerts"]
        assert len(alerts) == 1
        assert alerts[0]["rule"] == "UnauthorizedBurst"
        assert alerts[0]["subject"] == "probe-bot"

    def test_rate_limit_scenario(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "rate_limit_probe.json")
        assert outcome.passed, [r.diffs for r in outcome.results if not r.passed]

    def test_malformed_scenarios_rejected(self, tmp_path):
        gateway, clock = harness(tmp_path)
        try:
            with pytest.raises(adk.ScenarioError):
                adk.run_scenario({"name": "x", "seed": 1, "steps": []}, gateway, clock)
            with pytest.raises(adk.ScenarioError):
                adk.run_scenario(
                    {"name": "x", "seed": 1, "steps": [{"action": {}}]}, gateway, clock
                )
            with pytest.raises(adk.ScenarioError):
                adk.run_scenario(
                    {
                        "name": "x",
                        "seed": 1,
                        "steps": [{"profile": {"claims": {"role": "r"}}, "action": {"aql": "Ping"}}],
                    },
                    gateway,
                    clock,
                )
        finally:
            gateway.close()

    def test_parallel_group_entries_digest_ordered(self, tmp_path):
        step = {
            "profile": {"agent_type": "human"},
            "action": {"aql": "Ping{pong}"},
            "parallel_group": "g1",
        }
        scenario = {"name": "p", "seed": 1, "steps": [dict(step), dict(step), dict(step)]}
        digests = set()
        for _ in range(3):
            gateway, clock = harness(tmp_path)
            try:
                outcome = adk.run_scenario(scenario, gateway, clock)
            finally:
                gateway.close()
            digests.add(outcome.trace["transcript_digest"])
        assert len(digests) == 1  # deterministic despite thread interleaving


class TestReplay:
    def test_replay_unmodified_matches(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "replay_20_steps.json")
        assert outcome.passed, [r.diffs for r in outcome.results if not r.passed]
        assert len(outcome.trace["entries"]) == 20

        gateway, clock = harness(tmp_path)
        try:
            report = adk.replay(outcome.trace, gateway, clock)
        finally:
            gateway.close()
        assert report.matched
        assert report.diverged == []
        assert report.replayed_digest == report.recorded_digest

    def test_replay_twice_identical_reports(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "order_happy_path.json")
        reports = []
        for _ in range(2):
            gateway, clock = harness(tmp_path)
            try:
                reports.append(adk.replay(outcome.trace, gateway, clock))
            finally:
                gateway.close()
        assert reports[0] == reports[1]

    def test_changed_fixture_diverges_at_body_path(self, tmp_path):
        # Same config document (same digest), mutated fixture contents.
        fixture_copy = tmp_path / "orders_copy.json"
        fixture_copy.write_text((PLAYBOOK / "fixtures" / "orders.json").read_text())
        overrides = {"upstreams": {"orders": {"kind": "mock", "fixture": str(fixture_copy)}}}

        outcome = run_playbook_scenario(tmp_path, "order_happy_path.json", **overrides)
        assert outcome.passed

        fixtures = json.loads(fixture_copy.read_text())
        fixtures["/orders/42/status"]["body"]["status"] = "lost"
        fixture_copy.write_text(json.dumps(fixtures))

        gateway, clock = harness(tmp_path, **overrides)
        try:
            report = adk.replay(outcome.trace, gateway, clock)
        finally:
            gateway.close()
        assert not report.matched
        assert report.diverged[0]["step"] == 0
        assert report.diverged[0]["path"] == "body.status"

    def test_config_change_is_a_mismatch(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "order_happy_path.json")
        gateway, clock = harness(tmp_path, flow={"cache": {"enabled": False}})
        try:
            with pytest.raises(adk.ConfigMismatch):
                adk.replay(outcome.trace, gateway, clock)
        finally:
            gateway.close()

    def test_tampered_trace_rejected(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "order_happy_path.json")
        trace = json.loads(json.dumps(outcome.trace))
        trace["entries"][0]["response"]["status"] = 500
        with pytest.raises(adk.TraceIntegrityError):
            adk.load_trace(trace)


class TestTemplates:
    def test_one_template_per_intent_and_all_parse(self, gateway):
        discovery = gateway.discovery_document()
        templates = adk.generate_templates(discovery)
        assert len(templates) == len(discovery["intents"])
        for template in templates:
            assert template["required_headers"]["X-Agent-Type"] == "AI"
            assert template["required_headers"]["X-Agent-Intent"] == template["intent"]

    def test_empty_document(self):
        assert adk.generate_templates({"intents": []}) == []

    def test_templates_execute_without_unknown_intent(self, tmp_path):
        gateway, clock = harness(tmp_path)
        try:
            from conftest import aql_request, mint_token

            token = mint_token(
                subject="tpl",
                role="order-processing",
                scopes=("order:read", "order:write", "profile:read"),
            )
            gateway.consent.update("tpl", "profile", True, clock.now())
            for template in adk.generate_templates(gateway.discovery_document()):
                response = gateway.handle(
                    aql_request(template["template"], token=token, intent=template["intent"])
                )
                assert response.status != 404, template["intent"]
                error = response.json().get("error", {}) if response.status != 200 else {}
                assert error.get("code") != "unknown_intent"
        finally:
            gateway.close()


class TestReport:
    def test_report_consistent_with_metrics(self, tmp_path):
        gateway, clock = harness(tmp_path)
        try:
            outcome = adk.run_scenario(SCENARIOS / "order_happy_path.json", gateway, clock)
            live = adk.report_from_gateway(gateway)
        finally:
            gateway.close()
        from_trace = adk.report_from_trace(outcome.trace)
        assert from_trace["intents"] == live["intents"]
        assert from_trace["cache_hit_ratio"] == live["cache_hit_ratio"]

    def test_success_rate_arithmetic(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "denied_and_alerts.json")
        report = adk.report_from_trace(outcome.trace)
        stats = report["intents"]["OrderManage"]
        assert stats["attempts"] == 3
        assert stats["success_rate"] == 0.0
        assert stats["denials"] == 3

    def test_cache_hit_ratio_matches_audit_recount(self, tmp_path):
        gateway, clock = harness(tmp_path)
        try:
            adk.run_scenario(SCENARIOS / "order_happy_path.json", gateway, clock)
            hits = sum(1 for r in gateway.audit.records() if r.cache.value == "Hit")
            misses = sum(1 for r in gateway.audit.records() if r.cache.value == "Miss")
            report = adk.report_from_gateway(gateway)
        finally:
            gateway.close()
        assert report["cache_hit_ratio"] == pytest.approx(hits / (hits + misses))
        assert report["cache_hit_ratio"] > 0  # the repeated summary query hit

    def test_render_report_text(self, tmp_path):
        outcome = run_playbook_scenario(tmp_path, "denied_and_alerts.json")
        text = adk.render_report(adk.report_from_trace(outcome.trace))
        assert "OrderManage" in text
        assert "UnauthorizedBurst" in text


class TestCli:
    def run_cli(self, entry, *argv):
        bootstrap = f"import sys; from agentgate.cli import {entry}; sys.exit({entry}(sys.argv[1:]))"
        return subprocess.run(
            [sys.executable, "-c", bootstrap, *argv],
            capture_output=True,
            text=True,
            timeout=60,
        )

    def test_gateway_validate(self, tmp_path):
        config = write_config(tmp_path, playbook_config_doc())
        result = self.run_cli("gateway_main", "validate", "--config", str(config))
        assert result.returncode == 0, result.stderr
        assert "ok: 6 intents" in result.stdout

    def test_gateway_validate_rejects_bad_config(self, tmp_path):
        doc = playbook_config_doc(token_key="")
        config = write_config(tmp_path, doc)
        result = self.run_cli("gateway_main", "validate", "--config", str(config))
        assert result.returncode == 2

    def test_gateway_discover(self, tmp_path):
        config = write_config(tmp_path, playbook_config_doc())
        result = self.run_cli("gateway_main", "discover", "--config", str(config))
        assert result.returncode == 0, result.stderr
        doc = json.loads(result.stdout)
        assert [i["name"] for i in doc["intents"]] == sorted(i["name"] for i in doc["intents"])

    def test_adk_run_and_replay_and_report(self, tmp_path):
        config = write_config(tmp_path, playbook_config_doc())
        trace_path = tmp_path / "trace.json"
        run = self.run_cli(
            "adk_main", "run", str(SCENARIOS / "order_happy_path.json"),
            "--config", str(config), "--out", str(trace_path),
        )
        assert run.returncode == 0, run.stderr + run.stdout
        assert "step 0: pass" in run.stdout
        assert trace_path.exists()

        replay = self.run_cli("adk_main", "replay", str(trace_path), "--config", str(config))
        assert replay.returncode == 0, replay.stderr + replay.stdout
        assert replay.stdout.startswith("matched")

        report = self.run_cli("adk_main", "report", str(trace_path))
        assert report.returncode == 0
        assert "cache hit ratio" in report.stdout

        report_json = self.run_cli("adk_main", "report", str(trace_path), "--json")
        assert report_json.returncode == 0
        json.loads(report_json.stdout)

    def test_adk_templates_from_file(self, tmp_path):
        config = write_config(tmp_path, playbook_config_doc())
        discover = self.run_cli("gateway_main", "discover", "--config", str(config))
        discovery_path = tmp_path / "discovery.json"
        discovery_path.write_text(discover.stdout)
        result = self.run_cli("adk_main", "templates", "--from", str(discovery_path))
        assert result.returncode == 0, result.stderr
        templates = json.loads(result.stdout)
        assert len(templates) == 6

    def test_adk_run_failing_expectation_exit_code(self, tmp_path):
        config = write_config(tmp_path, playbook_config_doc())
        scenario = {
            "name": "fail",
            "seed": 1,
            "steps": [
                {"profile": {"agent_type": "human"}, "action": {"aql": "Ping"}, "expected": {"status": 418}}
            ],
        }
        scenario_path = tmp_path / "scenario.json"
        scenario_path.write_text(json.dumps(scenario))
        result = self.run_cli("adk_main", "run", str(scenario_path), "--config", str(config))
        assert result.returncode == 1
        assert "fail" in result.stdout
