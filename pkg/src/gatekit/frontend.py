"""Frontend gateway: mTLS termination, certificate auth, identity injection.

The single place client identity is established. Every request that clears
authentication and authorization is proxied to the routed backend target
with identity headers plus an HMAC origin proof the backend ingress checks.

The request pipeline (GatewayApp.handle) is transport-independent: the HTTP
server adapts a socket to a GatewayRequest, and tests drive the same
pipeline with constructed certificate chains.
"""
from __future__ import annotations

import logging
import random
import ssl
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from cryptography import x509

from . import signing
from .auth import AuthPolicy, CertificateRejected, authorize, verify_client_certificate
from .httputil import UpstreamTimeout, UpstreamUnreachable, new_conn_cache, proxy_request
from .metrics import CONTENT_TYPE, Registry, render
from .topology import RouteNotFound, RoutingTable, resolve_route

log = logging.getLogger("gatekit.frontend")

__all__ = ["GatewayRequest", "GatewayResponse", "GatewayApp", "FrontendServer", "make_ssl_context"]


@dataclass
class GatewayRequest:
    method: str
    path: str
    headers: dict[str, str]
    body: bytes
    peer_chain: list[x509.Certificate] | None  # None or [] means no client cert
    peer_address: str = ""


@dataclass
class GatewayResponse:
    status: int
    headers: list[tuple[str, str]]
    body: bytes


def _text(status: int, message: str, extra: list[tuple[str, str]] | None = None) -> GatewayResponse:
    headers = [("Content-Type", "text/plain")] + (extra or [])
    return GatewayResponse(status, headers, message.encode() + b"\n")


@dataclass
class GatewayApp:
    table: RoutingTable
    policy: AuthPolicy
    registry: Registry = field(default_factory=Registry)
    upstream_timeout: float = 10.0
    rng: random.Random = field(default_factory=random.Random)

    def __post_init__(self):
        self._conn_cache = new_conn_cache()
        self._rng_lock = threading.Lock()
        # Verified-identity cache keyed by the presented chain. Entries are
        # revalidated against the clock on every hit, so expiry still bites;
        # policy is immutable per app, so roles and revocation never go stale.
        self._identity_cache: dict[tuple, object] = {}

    def swap_table(self, table: RoutingTable):
        self.table = table  # attribute swap is atomic; handlers read once

    def _draw(self) -> float:
        with self._rng_lock:
            return self.rng.random()

    def _verify_cached(self, chain: list[x509.Certificate], now: float):
        key = tuple(chain)
        cached = self._identity_cache.get(key)
        if cached is not None:
            identity, expiry = cached
            if now <= expiry:
                return identity
            del self._identity_cache[key]
        identity = verify_client_certificate(chain, self.policy, now)
        if len(self._identity_cache) >= 1024:
            self._identity_cache.clear()
        expiry = min(c.not_valid_after_utc.timestamp() for c in chain)
        self._identity_cache[key] = (identity, expiry)
        return identity

    def handle(self, request: GatewayRequest) -> GatewayResponse:
        if request.path == "/healthz":
            return _text(200, "ok")
        if request.path == "/metrics":
            return GatewayResponse(200, [("Content-Type", CONTENT_TYPE)],
                                   render(self.registry).encode())
        now = time.time()
        try:
            identity = self._verify_cached(request.peer_chain or [], now)
        except CertificateRejected as exc:
            self.registry.counter_add("auth_failures_total", labels={"reason": exc.reason})
            return _text(401, "authentication failed", [("X-Auth-Reason", exc.reason)])
        table = self.table
        try:
            decision = resolve_route(table, request.path, self._draw())
        except RouteNotFound:
            return _text(404, "no service matches this path")
        spec = next(s for _, s in table.entries if s.name == decision.service_name)
        auth = authorize(identity, spec.required_roles)
        if not auth.allowed:
            self.registry.counter_add("auth_failures_total", labels={"reason": auth.reason})
            return _text(403, "not authorized for this service", [("X-Auth-Reason", auth.reason)])
        return self.forward(request, decision, identity, now)

    def forward(self, request: GatewayRequest, decision, identity, now: float) -> GatewayResponse:
        """Proxy with injected identity and origin-proof headers."""
        timestamp = int(now)
        headers = dict(request.headers)
        # Never trust client-supplied identity headers.
        for hop in (signing.AUTH_DN_HEADER, signing.AUTH_ROLES_HEADER,
                    signing.ORIGIN_TIME_HEADER, signing.ORIGIN_SIG_HEADER):
            headers.pop(hop, None)
        headers[signing.AUTH_DN_HEADER] = identity.subject_dn
        headers[signing.AUTH_ROLES_HEADER] = ",".join(identity.roles)
        headers[signing.ORIGIN_TIME_HEADER] = str(timestamp)
        headers[signing.ORIGIN_SIG_HEADER] = signing.sign_request(
            self.policy.origin_secret, request.method, decision.stripped_path, timestamp
        )
        labels = {"service": decision.service_name}
        self.registry.gauge_add("requests_inflight", 1, labels)
        start = time.perf_counter()
        try:
            resp = proxy_request(
                self._conn_cache, decision.target, request.method, decision.stripped_path,
                headers, request.body, self.upstream_timeout,
            )
        except UpstreamTimeout:
            self.registry.counter_add("http_requests_total", labels={**labels, "code": "504"})
            return _text(504, "upstream deadline exceeded")
        except UpstreamUnreachable:
            self.registry.counter_add("http_requests_total", labels={**labels, "code": "502"})
            return _text(502, "backend unreachable")
        finally:
            self.registry.gauge_add("requests_inflight", -1, labels)
            self.registry.histogram_observe(
                "http_request_duration_seconds", time.perf_counter() - start, labels
            )
        self.registry.counter_add(
            "http_requests_total", labels={**labels, "code": str(resp.status)}
        )
        return GatewayResponse(resp.status, resp.headers, resp.body)


class _FrontendHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # One coalesced write per response; avoids Nagle/delayed-ACK stalls.
    wbufsize = -1
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        log.debug("frontend " + fmt, *args)

    def _peer_chain(self) -> list[x509.Certificate]:
        conn = self.connection
        if not isinstance(conn, ssl.SSLSocket):
            return []
        der = conn.getpeercert(binary_form=True)
        if not der:
            return []
        cache = self.server.cert_cache  # type: ignore[attr-defined]
        cert = cache.get(der)
        if cert is None:
            cert = x509.load_der_x509_certificate(der)
            if len(cache) >= 1024:
                cache.clear()
            cache[der] = cert
        return [cert]

    def _dispatch(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        app: GatewayApp = self.server.app  # type: ignore[attr-defined]
        response = app.handle(GatewayRequest(
            method=self.command,
            path=self.path,
            headers=dict(self.headers.items()),
            body=body,
            peer_chain=self._peer_chain(),
            peer_address=self.client_address[0],
        ))
        self.send_response(response.status)
        seen = set()
        for key, value in response.headers:
            seen.add(key.lower())
            self.send_header(key, value)
        if "content-length" not in seen:
            self.send_header("Content-Length", str(len(response.body)))
        self.end_headers()
        self.wfile.write(response.body)

    do_GET = do_POST = do_PUT = do_DELETE = _dispatch


def make_ssl_context(certfile: str, keyfile: str, ca_file: str,
                     require_client_cert: bool = False) -> ssl.SSLContext:
    context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    context.load_cert_chain(certfile, keyfile)
    context.load_verify_locations(ca_file)
    context.verify_mode = ssl.CERT_REQUIRED if require_client_cert else ssl.CERT_OPTIONAL
    return context


class FrontendServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], app: GatewayApp,
                 ssl_context: ssl.SSLContext | None = None):
        super().__init__(address, _FrontendHandler)
        self.app = app
        self.cert_cache: dict[bytes, x509.Certificate] = {}
        if ssl_context is not None:
            self.socket = ssl_context.wrap_socket(self.socket, server_side=True)

    def handle_error(self, request, client_address):
        # TLS handshake failures from unauthenticated peers are routine.
        log.debug("connection error from %s", client_address, exc_info=True)
