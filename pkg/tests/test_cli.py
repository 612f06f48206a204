import http.client
import json
import os
import signal
import subprocess
import sys
import threading
import time

import pytest

from gatekit.cli import main

SECRET = "0123456789abcdef0123456789abcdef"


def write_topology(tmp_path, *, dup_prefix=False):
    services = [
        {"name": "echo", "path_prefix": "/echo",
         "tracks": [{"label": "stable", "weight": 1, "endpoints": ["127.0.0.1:1"]}]},
    ]
    if dup_prefix:
        services.append({
            "name": "echo2", "path_prefix": "/echo",
            "tracks": [{"label": "stable", "weight": 1, "endpoints": ["127.0.0.1:2"]}],
        })
    path = tmp_path / "topology.json"
    path.write_text(json.dumps({"services": services}))
    return str(path)


class TestValidate:
    def test_valid_topology_exits_zero(self, tmp_path, capsys):
        assert main(["validate", "--topology", write_topology(tmp_path)]) == 0
        assert "topology ok" in capsys.readouterr().out

    def test_duplicate_prefix_exits_one_and_names_prefix(self, tmp_path, capsys):
        rc = main(["validate", "--topology", write_topology(tmp_path, dup_prefix=True)])
        assert rc == 1
        assert "/echo" in capsys.readouterr().err

    def test_missing_file_exits_one(self, tmp_path):
        assert main(["validate", "--topology", str(tmp_path / "nope.json")]) == 1

    def test_policies_and_auth_policy_validated(self, tmp_path, ca, capsys):
        topo = write_topology(tmp_path)
        policies = tmp_path / "policies.json"
        policies.write_text(json.dumps([{
            "service_name": "echo", "metric_name": "requests_inflight",
            "target_per_replica": 10, "min_replicas": 1, "max_replicas": 4,
        }]))
        (tmp_path / "root.pem").write_bytes(ca.cert_pem)
        auth = tmp_path / "auth.json"
        auth.write_text(json.dumps({"trusted_roots": ["root.pem"], "dn_role_rules": []}))
        rc = main(["validate", "--topology", topo, "--policies", str(policies),
                   "--auth-policy", str(auth)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "scale policies ok" in out and "auth policy ok" in out

    def test_bad_policies_exit_one(self, tmp_path):
        topo = write_topology(tmp_path)
        policies = tmp_path / "policies.json"
        policies.write_text("{}")
        assert main(["validate", "--topology", topo, "--policies", str(policies)]) == 1


class TestUsage:
    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_no_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "gatekit" in capsys.readouterr().out


class TestBenchCommand:
    @pytest.fixture
    def echo_server(self):
        from gatekit.workload import make_workload_server

        server = make_workload_server("echo", 0)
        port = server.server_address[1]
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        yield port
        server.shutdown()
        server.server_close()

    def test_bench_prints_summary_and_writes_outputs(self, echo_server, tmp_path, capsys):
        csv_path = tmp_path / "out.csv"
        dat_path = tmp_path / "out.dat"
        rc = main(["bench", "--url", f"http://127.0.0.1:{echo_server}/echo/x",
                   "-n", "6", "-c", "3", "-k", "3", "--label", "smoke",
                   "--csv", str(csv_path), "--plot-data", str(dat_path)])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["label"] == "smoke"
        assert doc["runs"] == 3
        assert doc["status_histogram"] == {"200": 18}
        assert doc["errors"] == 0
        assert csv_path.read_text().startswith("label,")
        assert dat_path.read_text().startswith("# label")

    def test_bench_against_refused_port_reports_errors_but_exits_zero(self, capsys):
        import socket

        with socket.socket() as sock:
            sock.bind(("127.0.0.1", 0))
            port = sock.getsockname()[1]
        rc = main(["bench", "--url", f"http://127.0.0.1:{port}/", "-n", "4",
                   "-c", "2", "-k", "1", "--timeout", "0.5", "--warmup", "0"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["errors"] == 4


class TestAutoscaleCommand:
    def test_dry_run_once_prints_decisions(self, tmp_path, capsys):
        from gatekit.metrics import CONTENT_TYPE, Registry, render
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        registry = Registry()
        registry.gauge_set("requests_inflight", 80.0, {"service": "echo"})
        registry.gauge_set("replicas_current", 4, {"service": "echo"})
        body = render(registry).encode()

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_GET(self):
                self.send_response(200)
                self.send_header("Content-Type", CONTENT_TYPE)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        port = server.server_address[1]
        threading.Thread(target=server.serve_forever, daemon=True).start()
        policies = tmp_path / "policies.json"
        policies.write_text(json.dumps([{
            "service_name": "echo", "metric_name": "requests_inflight",
            "target_per_replica": 10, "min_replicas": 1, "max_replicas": 16,
        }]))
        try:
            rc = main(["autoscale", "--policies", str(policies),
                       "--scrape-url", f"http://127.0.0.1:{port}/metrics",
                       "--dry-run", "--once"])
        finally:
            server.shutdown()
            server.server_close()
        assert rc == 0
        decision = json.loads(capsys.readouterr().out)
        assert decision == {"service": "echo", "current": 4, "desired": 8,
                            "reason": "observed=80 target=10/replica"}


def wait_for(predicate, timeout=15.0, interval=0.1):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


def port_answers(port, path="/healthz"):
    try:
        conn = http.client.HTTPConnection("127.0.0.1", port, timeout=1)
        try:
            conn.request("GET", path)
            return conn.getresponse().status == 200
        finally:
            conn.close()
    except OSError:
        return False


class TestServerProcesses:
    """Signal handling requires the main thread, so long-running subcommands
    are exercised as real child processes."""

    def spawn(self, argv, tmp_path):
        env = dict(os.environ, GATEKIT_ORIGIN_SECRET=SECRET)
        return subprocess.Popen(
            [sys.executable, "-m", "gatekit", *argv],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, env=env,
            cwd=str(tmp_path),
        )

    def test_backend_serves_and_reaps_children_on_sigterm(self, tmp_path):
        from gatekit.httputil import free_port

        topo = tmp_path / "topology.json"
        topo.write_text(json.dumps({"services": [
            {"name": "echo", "path_prefix": "/echo", "kind": "echo",
             "min_replicas": 1, "max_replicas": 2,
             "tracks": [{"label": "stable", "weight": 1, "endpoints": ["127.0.0.1:1"]}]},
        ]}))
        port = free_port()
        proc = self.spawn(["backend", "--listen", f"127.0.0.1:{port}",
                           "--topology", str(topo)], tmp_path)
        try:
            assert wait_for(lambda: port_answers(port)), "backend never became healthy"
            # replica children exist while the backend runs
            children = subprocess.run(
                ["pgrep", "-P", str(proc.pid)], capture_output=True, text=True
            ).stdout.split()
            assert children, "expected at least one replica child process"
            proc.send_signal(signal.SIGTERM)
            assert proc.wait(timeout=15) == 0
            # all children reaped
            for pid in children:
                assert not os.path.exists(f"/proc/{pid}"), f"child {pid} survived"
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()

    def test_frontend_serves_plaintext_and_stops_on_sigint(self, tmp_path, ca):
        from gatekit.httputil import free_port

        topo_path = tmp_path / "topology.json"
        topo_path.write_text(json.dumps({"services": [
            {"name": "echo", "path_prefix": "/echo",
             "tracks": [{"label": "stable", "weight": 1, "endpoints": ["127.0.0.1:1"]}]},
        ]}))
        (tmp_path / "root.pem").write_bytes(ca.cert_pem)
        auth = tmp_path / "auth.json"
        auth.write_text(json.dumps({"trusted_roots": ["root.pem"], "dn_role_rules": []}))
        port = free_port()
        proc = self.spawn(["frontend", "--listen", f"127.0.0.1:{port}",
                           "--topology", str(topo_path), "--auth-policy", str(auth)],
                          tmp_path)
        try:
            assert wait_for(lambda: port_answers(port)), "frontend never became healthy"
            assert port_answers(port, "/metrics")
            proc.send_signal(signal.SIGINT)
            assert proc.wait(timeout=15) == 0
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
