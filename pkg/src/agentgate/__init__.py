"""agentgate: an agent-aware API gateway.

Intent-based routing over an Agent Query Language, per-session context
middleware, context-aware caching and priority scheduling, role/scope/
consent/rate-limit policy enforcement, audit with anomaly detection, a
machine-readable discovery document, and an agent development kit — all
runnable end-to-end against deterministic in-process mock upstreams.
"""

__version__ = "0.1.0"
