"""Upstream clients: deterministic in-process mocks and a remote fetcher.

A mock fixture maps concrete paths to responses:

    {
      "/orders/42/status": {
        "body": {...},
        "data_last_updated": "2025-01-10T08:30:00Z",
        "script": [{"kind": "http_error", "status": 500}, {"kind": "ok"}]
      },
      "*": {"body": {...}}        // optional fallback for unmatched paths
    }

The optional script is consumed one outcome per call (then the entry always
succeeds), which is how scenario tests exercise retries and failures. Call
counters per path are the oracle for cache-effectiveness claims.
"""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from collections import Counter

from ..flow import UpstreamHTTPError, UpstreamTimeout
from .config import UpstreamConfig

FALLBACK_PATH = "*"


class MockUpstream:
    """Deterministic scripted upstream; same fixture + call order, same answers."""

    def __init__(self, name: str, fixture: dict):
        self.name = name
        self._fixture = fixture
        self._scripts = {
            path: list(entry.get("script") or [])
            for path, entry in fixture.items()
            if isinstance(entry, dict)
        }
        self._calls: Counter = Counter()
        self._lock = threading.Lock()

    def fetch(self, path: str) -> tuple[object, str | None]:
        with self._lock:
            self._calls[path] += 1
            entry = self._fixture.get(path)
            used_path = path
            if entry is None:
                entry = self._fixture.get(FALLBACK_PATH)
                used_path = FALLBACK_PATH
            if entry is None:
                raise UpstreamHTTPError(404, f"{self.name}: no fixture for {path}")
            script = self._scripts.get(used_path)
            outcome = script.pop(0) if script else {"kind": "ok"}

        kind = outcome.get("kind", "ok")
        if kind == "timeout":
            raise UpstreamTimeout(f"{self.name}: scripted timeout on {path}")
        if kind == "http_error":
            raise UpstreamHTTPError(
                int(outcome.get("status", 500)),
                f"{self.name}: scripted failure on {path}",
                retry_after_seconds=outcome.get("retry_after_seconds"),
            )
        return entry.get("body"), entry.get("data_last_updated")

    def call_count(self, path: str) -> int:
        with self._lock:
            return self._calls[path]

    def total_calls(self) -> int:
        with self._lock:
            return sum(self._calls.values())

    def reset_counters(self) -> None:
        with self._lock:
            self._calls.clear()


class RemoteUpstream:
    """GET-only JSON fetcher against a real base URL.

    Freshness comes from the X-Data-LastUpdated response header; Retry-After
    on failures feeds the retry policy.
    """

    def __init__(self, name: str, base_url: str, timeout_seconds: float = 5.0):
        self.name = name
        self._base_url = base_url
        self._timeout = timeout_seconds

    def fetch(self, path: str) -> tuple[object, str | None]:
        url = self._base_url + path
        request = urllib.request.Request(url, headers={"Accept": "application/json"})
        try:
            with urllib.request.urlopen(request, timeout=self._timeout) as response:
                body = json.loads(response.read().decode("utf-8"))
                return body, response.headers.get("X-Data-LastUpdated")
        except urllib.error.HTTPError as exc:
            retry_after = exc.headers.get("Retry-After") if exc.headers else None
            raise UpstreamHTTPError(
                exc.code,
                f"{self.name}: {url} returned {exc.code}",
                retry_after_seconds=int(retry_after) if retry_after else None,
            ) from exc
        except urllib.error.URLError as exc:
            raise UpstreamTimeout(f"{self.name}: {url} unreachable: {exc.reason}") from exc
        except TimeoutError as exc:
            raise UpstreamTimeout(f"{self.name}: {url} timed out") from exc


def build_upstreams(configs: dict[str, UpstreamConfig]) -> dict[str, MockUpstream | RemoteUpstream]:
    out: dict[str, MockUpstream | RemoteUpstream] = {}
    for name, cfg in configs.items():
        if cfg.kind == "mock":
            out[name] = MockUpstream(name, cfg.fixture or {})
        else:
            out[name] = RemoteUpstream(name, cfg.base_url or "", cfg.timeout_seconds)
    return out
