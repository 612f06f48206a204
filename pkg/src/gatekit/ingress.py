"""Backend ingress: admission limits, frontend-origin verification, dispatch.

Sits in front of the replica pool. Connections beyond the configured limit
are answered 503 and closed (the file-descriptor exhaustion failure made
explicit and countable). Requests must prove they came through the frontend
gateway: peer address on the allowlist plus a fresh HMAC origin signature.
"""
from __future__ import annotations

import itertools
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import signing
from .httputil import UpstreamTimeout, UpstreamUnreachable, new_conn_cache, proxy_request
from .metrics import CONTENT_TYPE, Registry, render
from .topology import RouteNotFound, RoutingTable, match_service
from .workload import ReplicaPool

log = logging.getLogger("gatekit.ingress")

DEFAULT_CONNECTION_LIMIT = 1024
DEFAULT_ALLOWED_PEERS = ("127.",)

__all__ = [
    "AdmissionState",
    "OriginConfig",
    "verify_frontend_origin",
    "BackendApp",
    "BackendServer",
]


class AdmissionState:
    """Connection-level admission counter with a hard upper bound."""

    def __init__(self, connection_limit: int = DEFAULT_CONNECTION_LIMIT):
        if connection_limit < 1:
            raise ValueError("connection_limit must be positive")
        self.connection_limit = connection_limit
        self._lock = threading.Lock()
        self.active_connections = 0
        self.rejected_total = 0
        self.peak_active = 0

    def admit(self) -> bool:
        with self._lock:
            if self.active_connections < self.connection_limit:
                self.active_connections += 1
                # Invariant checked on every admission, not just in tests.
                assert self.active_connections <= self.connection_limit
                self.peak_active = max(self.peak_active, self.active_connections)
                return True
            self.rejected_total += 1
            return False

    def release(self):
        with self._lock:
            assert self.active_connections > 0
            self.active_connections -= 1


@dataclass
class OriginConfig:
    origin_secret: bytes
    allowed_peers: tuple[str, ...] = DEFAULT_ALLOWED_PEERS
    clock_skew_tolerance: float = 60.0

    def __post_init__(self):
        signing.check_secret(self.origin_secret)
        if self.clock_skew_tolerance <= 0:
            raise ValueError("clock_skew_tolerance must be positive")


def verify_frontend_origin(
    headers: dict[str, str],
    peer_address: str,
    config: OriginConfig,
    now: float,
    method: str,
    path: str,
) -> bool:
    """True iff the request provably passed through the frontend gateway."""
    if not any(peer_address.startswith(prefix) for prefix in config.allowed_peers):
        return False
    lowered = {k.lower(): v for k, v in headers.items()}
    return signing.verify_signature(
        config.origin_secret,
        method,
        path,
        lowered.get(signing.ORIGIN_TIME_HEADER.lower()),
        lowered.get(signing.ORIGIN_SIG_HEADER.lower()),
        now,
        config.clock_skew_tolerance,
    )


@dataclass
class BackendApp:
    """Request pipeline behind admission: origin check, then path dispatch
    round-robin over healthy replicas."""

    table: RoutingTable
    pool: ReplicaPool
    origin: OriginConfig
    registry: Registry = field(default_factory=Registry)
    upstream_timeout: float = 10.0

    def __post_init__(self):
        self._conn_cache = new_conn_cache()
        self._rr: dict[str, itertools.count] = {}
        self._rr_lock = threading.Lock()

    def _next_index(self, service: str) -> int:
        with self._rr_lock:
            counter = self._rr.setdefault(service, itertools.count())
            return next(counter)

    def handle(self, method: str, path: str, headers: dict[str, str], body: bytes,
               peer_address: str, now: float | None = None):
        """Returns (status, headers, body)."""
        now = time.time() if now is None else now
        if path == "/healthz":
            return 200, [("Content-Type", "text/plain")], b"ok"
        if path == "/metrics":
            return 200, [("Content-Type", CONTENT_TYPE)], render(self.registry).encode()
        if not verify_frontend_origin(headers, peer_address, self.origin, now, method, path):
            self.registry.counter_add("origin_rejected_total")
            return 403, [("Content-Type", "text/plain")], b"origin verification failed"
        if path == "/admin/scale" and method == "POST":
            return self._admin_scale(body)
        return self.dispatch(method, path, headers, body)

    def _admin_scale(self, body: bytes):
        """Signed control endpoint used by the autoscaler CLI."""
        try:
            doc = json.loads(body)
            service, desired = doc["service"], int(doc["desired"])
        except (ValueError, KeyError, TypeError):
            return 400, [("Content-Type", "text/plain")], b"bad scale request"
        try:
            self.pool.set_desired(service, desired)
            actions = self.pool.reconcile(service)
        except (KeyError, ValueError) as exc:
            return 400, [("Content-Type", "text/plain")], str(exc).encode()
        payload = json.dumps({"service": service, "desired": desired,
                              "actions": [list(a) for a in actions]}).encode()
        return 200, [("Content-Type", "application/json")], payload

    def dispatch(self, method: str, path: str, headers: dict[str, str], body: bytes):
        try:
            spec = match_service(self.table, path)
        except RouteNotFound:
            return 404, [("Content-Type", "text/plain")], b"no such service"
        endpoints = self.pool.healthy_endpoints(spec.name)
        if not endpoints:
            self.registry.counter_add("dispatch_errors_total", labels={"service": spec.name})
            return 503, [("Content-Type", "text/plain")], b"no healthy replica"
        target = endpoints[self._next_index(spec.name) % len(endpoints)]
        try:
            resp = proxy_request(
                self._conn_cache, target, method, path, headers, body, self.upstream_timeout
            )
        except UpstreamTimeout:
            self.registry.counter_add("dispatch_errors_total", labels={"service": spec.name})
            return 504, [("Content-Type", "text/plain")], b"replica timeout"
        except UpstreamUnreachable:
            self.registry.counter_add("dispatch_errors_total", labels={"service": spec.name})
            return 502, [("Content-Type", "text/plain")], b"replica unreachable"
        self.registry.counter_add(
            "http_requests_total", labels={"service": spec.name, "code": str(resp.status)}
        )
        return resp.status, resp.headers, resp.body


class _BackendHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # One coalesced write per response; avoids Nagle/delayed-ACK stalls.
    wbufsize = -1
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        log.debug("ingress " + fmt, *args)

    def _dispatch(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        app: BackendApp = self.server.app  # type: ignore[attr-defined]
        status, headers, payload = app.handle(
            self.command, self.path, dict(self.headers.items()), body,
            peer_address=self.client_address[0],
        )
        self.send_response(status)
        seen = set()
        for key, value in headers:
            seen.add(key.lower())
            self.send_header(key, value)
        if "content-length" not in seen:
            self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    do_GET = do_POST = do_PUT = do_DELETE = _dispatch


class BackendServer(ThreadingHTTPServer):
    """ThreadingHTTPServer with connection admission: rejected connections
    get a bare 503 and are closed before any request parsing."""

    daemon_threads = True

    def __init__(self, address: tuple[str, int], app: BackendApp, admission: AdmissionState):
        super().__init__(address, _BackendHandler)
        self.app = app
        self.admission = admission

    def process_request_thread(self, request, client_address):
        if not self.admission.admit():
            self.app.registry.counter_add("connections_rejected_total")
            try:
                request.sendall(
                    b"HTTP/1.1 503 Service Unavailable\r\n"
                    b"Content-Length: 21\r\nConnection: close\r\n\r\n"
                    b"connection limit hit\n"
                )
            except OSError:
                pass
            self.shutdown_request(request)
            return
        try:
            super().process_request_thread(request, client_address)
        finally:
            self.admission.release()
