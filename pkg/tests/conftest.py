"""Shared fixtures: throwaway PKI material and small loopback servers.

RSA key generation is the slow part of the suite, so certificate bundles
are session-scoped and reused everywhere they can be.
"""
import datetime
import threading

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.x509.oid import NameOID

from gatekit import certs


@pytest.fixture(scope="session")
def ca():
    return certs.make_ca()


@pytest.fixture(scope="session")
def other_ca():
    """A second root the policies never trust."""
    return certs.make_ca("untrusted CA")


@pytest.fixture(scope="session")
def client_leaf(ca):
    return certs.make_leaf(ca, "demo-client")


def make_cn_leaf(ca_bundle, common_name, *, not_before=None, not_after=None):
    """Leaf whose subject is a bare CN (no organization), for DN rule tests."""
    key = certs._new_key()
    now = datetime.datetime.now(datetime.timezone.utc)
    builder = (
        x509.CertificateBuilder()
        .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)]))
        .issuer_name(ca_bundle.cert.subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before or (now - datetime.timedelta(minutes=5)))
        .not_valid_after(not_after or (now + datetime.timedelta(days=30)))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
    )
    return certs.CertBundle(builder.sign(ca_bundle.key, hashes.SHA256()), key)


class RecordingBackend:
    """Tiny HTTP server that records every request it observes."""

    def __init__(self):
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        backend = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            wbufsize = -1
            disable_nagle_algorithm = True

            def log_message(self, fmt, *args):
                pass

            def _serve(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                with backend.lock:
                    backend.requests.append(
                        (self.command, self.path, dict(self.headers.items()), body)
                    )
                payload = b"backend ok"
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            do_GET = do_POST = do_PUT = do_DELETE = _serve

        self.lock = threading.Lock()
        self.requests = []
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.port = self.server.server_address[1]
        self.endpoint = f"127.0.0.1:{self.port}"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def recording_backend():
    backend = RecordingBackend()
    yield backend
    backend.close()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    reports = terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
    lines = []
    for report in reports:
        if "test_acceptance.py::test_criterion" in report.nodeid:
            name = report.nodeid.split("::")[-1]
            lines.append((name, "PASS" if report.passed else "FAIL"))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {name}")
