"""Command-line entry points: `gateway` and `adk`."""

from __future__ import annotations

import argparse
import json
import sys
import urllib.request
from pathlib import Path

from . import adk
from .clock import VirtualClock
from .gateway import Gateway, GatewayServer
from .gateway import config as gwconfig
from .registry import ConfigError


def _load_config(path: str) -> gwconfig.GatewayConfig:
    try:
        return gwconfig.load(path)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(2) from exc


def gateway_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="gateway", description="Agent-aware API gateway")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP gateway")
    serve.add_argument("--config", required=True)
    serve.add_argument("--listen", default=None, help="host:port override")

    validate = sub.add_parser("validate", help="check a config document")
    validate.add_argument("--config", required=True)

    discover = sub.add_parser("discover", help="print the discovery document")
    discover.add_argument("--config", required=True)

    args = parser.parse_args(argv)

    if args.command == "validate":
        config = _load_config(args.config)
        print(f"ok: {len(config.registry)} intents, {len(config.upstreams)} upstreams")
        return 0

    if args.command == "discover":
        config = _load_config(args.config)
        gateway = Gateway(config)
        try:
            print(json.dumps(gateway.discovery_document(), indent=2, sort_keys=True))
        finally:
            gateway.close()
        return 0

    config = _load_config(args.config)
    gateway = Gateway(config)
    server = GatewayServer(gateway, listen=args.listen)
    print(f"listening on {server.address}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _build_harness(config_path: str, base_time: float) -> tuple[Gateway, VirtualClock]:
    config = _load_config(config_path)
    clock = VirtualClock(start=base_time)
    return Gateway(config, clock=clock), clock


def adk_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="adk", description="Agent development kit")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario against a mock-backed gateway")
    run.add_argument("scenario")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="write the trace JSON here")

    rep = sub.add_parser("replay", help="replay a recorded trace")
    rep.add_argument("trace")
    rep.add_argument("--config", required=True)

    templates = sub.add_parser("templates", help="generate intent templates")
    templates.add_argument("--from", dest="source", required=True, help="discovery JSON file or URL")

    report = sub.add_parser("report", help="summarize a trace")
    report.add_argument("trace")
    report.add_argument("--json", action="store_true", help="emit JSON instead of text")

    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            scenario = adk.load_scenario(args.scenario)
        except (adk.ScenarioError, OSError, json.JSONDecodeError) as exc:
            print(f"scenario error: {exc}", file=sys.stderr)
            return 2
        gateway, clock = _build_harness(args.config, scenario.get("base_time", adk.DEFAULT_BASE_TIME))
        try:
            outcome = adk.run_scenario(scenario, gateway, clock)
        finally:
            gateway.close()
        for result in outcome.results:
            status = "pass" if result.passed else "fail"
            line = f"step {result.index}: {status}"
            if result.diffs:
                line += "  (" + "; ".join(result.diffs) + ")"
            print(line)
        print(f"transcript digest: {outcome.trace['transcript_digest']}")
        if args.out:
            Path(args.out).write_text(json.dumps(outcome.trace, indent=2, sort_keys=True))
            print(f"trace written to {args.out}")
        return 0 if outcome.passed else 1

    if args.command == "replay":
        try:
            trace = adk.load_trace(args.trace)
        except (adk.TraceIntegrityError, OSError, json.JSONDecodeError) as exc:
            print(f"trace error: {exc}", file=sys.stderr)
            return 2
        gateway, clock = _build_harness(args.config, trace.get("base_time", adk.DEFAULT_BASE_TIME))
        try:
            result = adk.replay(trace, gateway, clock)
        except adk.ConfigMismatch as exc:
            print(f"config mismatch: {exc}", file=sys.stderr)
            return 2
        finally:
            gateway.close()
        if result.matched:
            print(f"matched: digest {result.replayed_digest}")
            return 0
        print(f"diverged at {len(result.diverged)} step(s):")
        for div in result.diverged:
            print(f"  step {div['step']}: first difference at {div['path']}")
        return 1

    if args.command == "templates":
        if args.source.startswith(("http://", "https://")):
            with urllib.request.urlopen(args.source, timeout=10) as response:
                discovery = json.loads(response.read().decode("utf-8"))
        else:
            discovery = json.loads(Path(args.source).read_text(encoding="utf-8"))
        print(json.dumps(adk.generate_templates(discovery), indent=2, sort_keys=True))
        return 0

    if args.command == "report":
        try:
            report_doc = adk.report_from_trace(args.trace)
        except (adk.TraceIntegrityError, OSError, json.JSONDecodeError) as exc:
            print(f"trace error: {exc}", file=sys.stderr)
            return 2
        if args.json:
            print(json.dumps(report_doc, indent=2, sort_keys=True))
        else:
            print(adk.render_report(report_doc))
        return 0

    parser.error("unknown command")
    return 2


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(gateway_main())
