from .config import GatewayConfig, load, loads
from .core import Gateway, GatewayRequest, GatewayResponse, PlanExecutionError
from .http import GatewayServer
from .upstream import MockUpstream, RemoteUpstream

__all__ = [
    "Gateway",
    "GatewayConfig",
    "GatewayRequest",
    "GatewayResponse",
    "GatewayServer",
    "MockUpstream",
    "PlanExecutionError",
    "RemoteUpstream",
    "load",
    "loads",
]
