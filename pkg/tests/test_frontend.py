import datetime
import hashlib
import hmac as hmac_mod
import http.client
import json
import socket
import ssl
import threading
import time

import pytest

from gatekit import certs, signing
from gatekit.auth import AuthPolicy
from gatekit.frontend import (
    FrontendServer,
    GatewayApp,
    GatewayRequest,
    make_ssl_context,
)
from gatekit.topology import build_routing_table, load_topology

from conftest import make_cn_leaf

SECRET = b"0123456789abcdef0123456789abcdef"


def make_policy(ca, **overrides):
    kwargs = dict(
        trusted_roots=[ca.cert],
        dn_role_rules=[("*CN=demo-client*", "operator")],
        revoked_dns=set(),
        origin_secret=SECRET,
    )
    kwargs.update(overrides)
    return AuthPolicy(**kwargs)


def make_app(ca, backend_endpoint, *, required_roles=(), policy=None):
    topo = load_topology(json.dumps({"services": [
        {"name": "echo", "path_prefix": "/echo",
         "required_roles": list(required_roles),
         "tracks": [{"label": "stable", "weight": 1, "endpoints": [backend_endpoint]}]},
    ]}))
    return GatewayApp(table=build_routing_table(topo), policy=policy or make_policy(ca))


def gw_request(path="/echo/x", chain=None, headers=None, method="GET", body=b""):
    return GatewayRequest(method=method, path=path, headers=headers or {},
                          body=body, peer_chain=chain, peer_address="127.0.0.1")


class TestPipeline:
    def test_valid_client_forwarded_with_identity_headers(self, ca, client_leaf,
                                                          recording_backend):
        app = make_app(ca, recording_backend.endpoint)
        response = app.handle(gw_request(chain=[client_leaf.cert]))
        assert response.status == 200
        assert response.body == b"backend ok"
        (method, path, headers, _body) = recording_backend.requests[0]
        assert path == "/echo/x"  # full path is forwarded unchanged
        assert headers[signing.AUTH_DN_HEADER] == client_leaf.cert.subject.rfc4514_string()
        assert headers[signing.AUTH_ROLES_HEADER] == "operator"
        # origin proof verifies against an independent HMAC
        ts = headers[signing.ORIGIN_TIME_HEADER]
        expected = hmac_mod.new(SECRET, f"{method}|{path}|{ts}".encode(),
                                hashlib.sha256).hexdigest()
        assert headers[signing.ORIGIN_SIG_HEADER] == expected

    def test_spoofed_identity_headers_stripped(self, ca, client_leaf, recording_backend):
        app = make_app(ca, recording_backend.endpoint)
        response = app.handle(gw_request(chain=[client_leaf.cert], headers={
            signing.AUTH_DN_HEADER: "CN=fake-admin",
            signing.AUTH_ROLES_HEADER: "admin",
        }))
        assert response.status == 200
        headers = recording_backend.requests[0][2]
        assert headers[signing.AUTH_DN_HEADER] == client_leaf.cert.subject.rfc4514_string()
        assert headers[signing.AUTH_ROLES_HEADER] == "operator"

    def test_no_certificate_is_401_with_reason(self, ca, recording_backend):
        app = make_app(ca, recording_backend.endpoint)
        response = app.handle(gw_request(chain=[]))
        assert response.status == 401
        assert ("X-Auth-Reason", "no_cert") in response.headers
        assert recording_backend.requests == []

    def test_untrusted_certificate_is_401(self, ca, other_ca, recording_backend):
        stranger = certs.make_leaf(other_ca, "demo-client")
        app = make_app(ca, recording_backend.endpoint)
        response = app.handle(gw_request(chain=[stranger.cert]))
        assert response.status == 401
        assert ("X-Auth-Reason", "untrusted_issuer") in response.headers
        assert recording_backend.requests == []

    def test_missing_role_is_403(self, ca, recording_backend):
        guest = make_cn_leaf(ca, "guest")
        app = make_app(ca, recording_backend.endpoint, required_roles=["operator"])
        response = app.handle(gw_request(chain=[guest.cert]))
        assert response.status == 403
        assert ("X-Auth-Reason", "no_role") in response.headers
        assert recording_backend.requests == []
        assert app.registry.value("auth_failures_total", {"reason": "no_role"}) == 1

    def test_unrouted_path_is_404(self, ca, client_leaf, recording_backend):
        app = make_app(ca, recording_backend.endpoint)
        assert app.handle(gw_request(path="/nope", chain=[client_leaf.cert])).status == 404

    def test_healthz_and_metrics_skip_auth(self, ca, recording_backend):
        app = make_app(ca, recording_backend.endpoint)
        assert app.handle(gw_request(path="/healthz", chain=[])).status == 200
        response = app.handle(gw_request(path="/metrics", chain=[]))
        assert response.status == 200
        assert ("Content-Type", "text/plain; version=0.0.4; charset=utf-8") in response.headers

    def test_unreachable_backend_is_502(self, ca, client_leaf):
        with socket.socket() as sock:
            sock.bind(("127.0.0.1", 0))
            port = sock.getsockname()[1]
        app = make_app(ca, f"127.0.0.1:{port}")
        response = app.handle(gw_request(chain=[client_leaf.cert]))
        assert response.status == 502
        assert app.registry.value("http_requests_total",
                                  {"service": "echo", "code": "502"}) == 1

    def test_slow_backend_is_504(self, ca, client_leaf):
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        class Slow(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_GET(self):
                time.sleep(2.0)
                self.send_response(200)
                self.send_header("Content-Length", "0")
                self.end_headers()

        server = ThreadingHTTPServer(("127.0.0.1", 0), Slow)
        server.daemon_threads = True
        port = server.server_address[1]
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            app = make_app(ca, f"127.0.0.1:{port}")
            app.upstream_timeout = 0.3
            response = app.handle(gw_request(chain=[client_leaf.cert]))
            assert response.status == 504
        finally:
            server.shutdown()
            server.server_close()

    def test_request_counter_and_latency_recorded(self, ca, client_leaf, recording_backend):
        app = make_app(ca, recording_backend.endpoint)
        app.handle(gw_request(chain=[client_leaf.cert]))
        assert app.registry.value("http_requests_total",
                                  {"service": "echo", "code": "200"}) == 1
        assert app.registry.value("requests_inflight", {"service": "echo"}) == 0


class TestIdentityCache:
    def test_cache_hit_skips_reverification(self, ca, client_leaf, recording_backend,
                                            monkeypatch):
        app = make_app(ca, recording_backend.endpoint)
        calls = []
        import gatekit.frontend as frontend_mod

        real = frontend_mod.verify_client_certificate

        def counting(chain, policy, now):
            calls.append(now)
            return real(chain, policy, now)

        monkeypatch.setattr(frontend_mod, "verify_client_certificate", counting)
        app.handle(gw_request(chain=[client_leaf.cert]))
        app.handle(gw_request(chain=[client_leaf.cert]))
        assert len(calls) == 1

    def test_cached_identity_expires_with_certificate(self, ca):
        now_dt = datetime.datetime.now(datetime.timezone.utc)
        leaf = make_cn_leaf(ca, "demo-client",
                            not_before=now_dt - datetime.timedelta(minutes=5),
                            not_after=now_dt + datetime.timedelta(seconds=60))
        app = make_app(ca, "127.0.0.1:1")
        now = time.time()
        identity = app._verify_cached([leaf.cert], now)
        assert identity.common_name == "demo-client"
        # after expiry the cached entry is revalidated and rejected
        from gatekit.auth import CertificateRejected

        with pytest.raises(CertificateRejected) as exc:
            app._verify_cached([leaf.cert], now + 3600)
        assert exc.value.reason == "expired"


class TestLiveMutualTls:
    @pytest.fixture()
    def stack(self, tmp_path, ca, client_leaf, recording_backend):
        server_leaf = certs.make_leaf(ca, "localhost", server=True)
        ca_path, server_cert, server_key = (tmp_path / n for n in
                                            ("ca.pem", "srv.pem", "srv.key"))
        ca_path.write_bytes(ca.cert_pem)
        server_leaf.write(str(server_cert), str(server_key))
        client_cert, client_key = tmp_path / "cli.pem", tmp_path / "cli.key"
        client_leaf.write(str(client_cert), str(client_key))

        app = make_app(ca, recording_backend.endpoint)
        context = make_ssl_context(str(server_cert), str(server_key), str(ca_path),
                                   require_client_cert=False)
        server = FrontendServer(("127.0.0.1", 0), app, context)
        port = server.server_address[1]
        threading.Thread(target=server.serve_forever, daemon=True).start()
        yield {
            "port": port,
            "ca": str(ca_path),
            "client_cert": str(client_cert),
            "client_key": str(client_key),
        }
        server.shutdown()
        server.server_close()

    def client_context(self, stack, with_cert=True):
        context = ssl.create_default_context(cafile=stack["ca"])
        if with_cert:
            context.load_cert_chain(stack["client_cert"], stack["client_key"])
        return context

    def test_mtls_round_trip(self, stack, recording_backend):
        conn = http.client.HTTPSConnection("localhost", stack["port"],
                                           context=self.client_context(stack), timeout=5)
        try:
            conn.request("GET", "/echo/live")
            resp = conn.getresponse()
            assert resp.status == 200
            assert resp.read() == b"backend ok"
        finally:
            conn.close()
        headers = recording_backend.requests[0][2]
        assert "demo-client" in headers[signing.AUTH_DN_HEADER]

    def test_connection_without_cert_gets_401(self, stack, recording_backend):
        conn = http.client.HTTPSConnection(
            "localhost", stack["port"],
            context=self.client_context(stack, with_cert=False), timeout=5)
        try:
            conn.request("GET", "/echo/live")
            resp = conn.getresponse()
            assert resp.status == 401
            resp.read()
        finally:
            conn.close()
        assert recording_backend.requests == []
