"""HTTP/1.1 adapter over the in-process pipeline (stdlib, threading server)."""

from __future__ import annotations

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .core import Gateway, GatewayRequest


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "agentgate"

    def _dispatch(self):
        gateway: Gateway = self.server.gateway  # type: ignore[attr-defined]
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        request = GatewayRequest(
            method=self.command,
            path=self.path,
            headers=list(self.headers.items()),
            body=body,
            client_address=self.client_address[0],
        )
        response = gateway.handle(request)
        self.send_response(response.status)
        for name, value in response.headers.items():
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(response.body)))
        self.end_headers()
        self.wfile.write(response.body)

    do_GET = _dispatch
    do_POST = _dispatch
    do_PUT = _dispatch
    do_DELETE = _dispatch

    def log_message(self, format, *args):  # audit log covers this
        pass


class GatewayServer:
    """Owns the socket; start()/stop() for embedding, serve_forever for CLI."""

    def __init__(self, gateway: Gateway, listen: str | None = None):
        self.gateway = gateway
        host, _, port = (listen or gateway.config.listen).rpartition(":")
        self._server = ThreadingHTTPServer((host or "127.0.0.1", int(port)), _Handler)
        self._server.gateway = gateway  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.gateway.close()
