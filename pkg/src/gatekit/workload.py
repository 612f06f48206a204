"""Stub workload services and the supervised replica pool.

Three service kinds stand in for real backends:

* echo     - returns the request body and observed headers as JSON
* burn     - holds the request for a configured number of milliseconds of
             busy spinning, the stand-in for request service time
* stateful - per-replica in-memory key/value store; round-robin across
             replicas makes the state-divergence problem observable

Each replica is an OS process serving one workload request at a time (one
replica = one concurrency slot), so adding replicas adds capacity the same
way adding pods does. Control-plane paths (/healthz, /wedge, /unwedge)
bypass the slot.
"""
from __future__ import annotations

import http.client
import json
import logging
import socket
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .metrics import Registry

log = logging.getLogger("gatekit.workload")

__all__ = [
    "WorkloadState",
    "handle_workload_request",
    "make_workload_server",
    "run_workload",
    "ReplicaHandle",
    "ReplicaPool",
    "Supervisor",
    "PortInUseError",
    "SpawnError",
    "probe",
]

HEALTH_STARTING = "starting"
HEALTH_HEALTHY = "healthy"
HEALTH_UNRESPONSIVE = "unresponsive"
HEALTH_STOPPED = "stopped"

STARTUP_DEADLINE = 5.0
STOP_GRACE = 2.0
FAILURE_THRESHOLD = 3
DEFAULT_PROBE_TIMEOUT = 1.0


class PortInUseError(OSError):
    pass


class SpawnError(RuntimeError):
    pass


@dataclass
class WorkloadState:
    kind: str
    port: int
    burn_ms: int = 0
    wedged: bool = False
    store: dict[str, bytes] = field(default_factory=dict)
    slot: threading.Semaphore = field(default_factory=lambda: threading.Semaphore(1))


def _burn(ms: float):
    """Hold the request for ms of wall time, spinning only the last stretch.

    Models a replica with a one-core CPU quota doing ms of work per request:
    the replica is occupied for the duration but the host core is not. A
    hard spin would pin total throughput to host core count and mask the
    effect of replica count, which is what the burn service exists to show.
    """
    deadline = time.perf_counter() + ms / 1000.0
    spins = 0
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0.0001:
            break
        time.sleep(remaining - 0.0001)
    # Final stretch is spun, not slept, so the deadline is hit precisely.
    while time.perf_counter() < deadline:
        spins += 1
    return spins


def handle_workload_request(
    state: WorkloadState,
    method: str,
    path: str,
    headers: dict[str, str],
    body: bytes,
) -> tuple[int, bytes]:
    """Service behavior behind the single request slot. Returns (status, body)."""
    if state.kind == "echo":
        payload = {
            "body": body.decode("utf-8", "replace"),
            "headers": dict(headers),
            "method": method,
            "path": path,
            "port": state.port,
        }
        return 200, json.dumps(payload).encode("utf-8")
    if state.kind == "burn":
        start = time.perf_counter()
        _burn(state.burn_ms)
        elapsed = time.perf_counter() - start
        payload = {"burn_ms": state.burn_ms, "elapsed_seconds": elapsed, "port": state.port}
        return 200, json.dumps(payload).encode("utf-8")
    if state.kind == "stateful":
        if method == "PUT":
            state.store[path] = body
            return 200, b"stored"
        if method == "GET":
            value = state.store.get(path)
            if value is None:
                return 404, b"key not found on this replica"
            return 200, value
        return 405, b"stateful supports GET and PUT"
    return 500, f"unknown workload kind {state.kind!r}".encode()


class _WorkloadHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # One coalesced write per response; avoids Nagle/delayed-ACK stalls.
    wbufsize = -1
    disable_nagle_algorithm = True
    state: WorkloadState  # set on the subclass

    def log_message(self, fmt, *args):
        log.debug("replica[%s:%s] " + fmt, self.state.kind, self.state.port, *args)

    def _reply(self, status: int, body: bytes, content_type: str = "application/json"):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _dispatch(self):
        state = self.state
        body = self._read_body()
        if self.path == "/healthz":
            if state.wedged:
                # Simulate an unresponsive service: drop the connection.
                self.close_connection = True
                self.connection.close()
                return
            self._reply(200, b"ok", "text/plain")
            return
        if self.path == "/wedge" and self.command == "POST":
            state.wedged = True
            self._reply(200, b"wedged", "text/plain")
            return
        if self.path == "/unwedge" and self.command == "POST":
            state.wedged = False
            self._reply(200, b"unwedged", "text/plain")
            return
        with state.slot:
            status, payload = handle_workload_request(
                state, self.command, self.path, dict(self.headers.items()), body
            )
        self._reply(status, payload)

    do_GET = do_POST = do_PUT = do_DELETE = _dispatch


def make_workload_server(kind: str, port: int, burn_ms: int = 0,
                         host: str = "127.0.0.1") -> ThreadingHTTPServer:
    state = WorkloadState(kind=kind, port=port, burn_ms=burn_ms)
    handler = type("Handler", (_WorkloadHandler,), {"state": state})
    try:
        server = ThreadingHTTPServer((host, port), handler)
    except OSError as exc:
        raise PortInUseError(f"port {port} unavailable: {exc}") from exc
    server.daemon_threads = True
    return server


def run_workload(kind: str, port: int, burn_ms: int = 0, host: str = "127.0.0.1"):
    server = make_workload_server(kind, port, burn_ms, host)
    log.info("workload kind=%s listening on %s:%d", kind, host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()


# --- replica lifecycle -----------------------------------------------------

@dataclass
class ReplicaHandle:
    service_name: str
    port: int
    process: subprocess.Popen
    started_at: float
    health: str = HEALTH_STARTING
    consecutive_failures: int = 0

    @property
    def endpoint(self) -> str:
        return f"127.0.0.1:{self.port}"


def probe(handle_or_port, timeout: float = DEFAULT_PROBE_TIMEOUT) -> bool:
    """GET /healthz; any error or non-200 is a failed probe."""
    port = handle_or_port.port if isinstance(handle_or_port, ReplicaHandle) else handle_or_port
    try:
        conn = http.client.HTTPConnection("127.0.0.1", port, timeout=timeout)
        try:
            conn.request("GET", "/healthz")
            resp = conn.getresponse()
            resp.read()
            return resp.status == 200
        finally:
            conn.close()
    except OSError:
        return False


def _port_is_free(port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        try:
            sock.bind(("127.0.0.1", port))
            return True
        except OSError:
            return False


def start_replica(service_name: str, kind: str, port: int, burn_ms: int = 0) -> ReplicaHandle:
    """Spawn a replica process and wait for it to answer /healthz."""
    if not _port_is_free(port):
        raise PortInUseError(f"port {port} already in use")
    argv = [
        sys.executable, "-m", "gatekit", "workload",
        "--kind", kind, "--port", str(port), "--burn-ms", str(burn_ms),
    ]
    process = subprocess.Popen(argv, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    handle = ReplicaHandle(service_name=service_name, port=port,
                           process=process, started_at=time.time())
    deadline = time.time() + STARTUP_DEADLINE
    while time.time() < deadline:
        if process.poll() is not None:
            raise SpawnError(f"replica for {service_name} exited with {process.returncode}")
        if probe(port, timeout=0.25):
            handle.health = HEALTH_HEALTHY
            return handle
        time.sleep(0.05)
    process.kill()
    process.wait()
    raise SpawnError(f"replica for {service_name} did not become healthy within {STARTUP_DEADLINE}s")


def stop_replica(handle: ReplicaHandle):
    """Terminate, then force-kill after the grace period."""
    handle.health = HEALTH_STOPPED
    if handle.process.poll() is None:
        handle.process.terminate()
        try:
            handle.process.wait(timeout=STOP_GRACE)
        except subprocess.TimeoutExpired:
            handle.process.kill()
            handle.process.wait()


@dataclass(frozen=True)
class PoolService:
    name: str
    kind: str
    burn_ms: int
    min_replicas: int
    max_replicas: int


class ReplicaPool:
    """Supervised set of replica processes, mutated only by its owner
    (supervisor loop or test); readers take snapshots."""

    def __init__(self, registry: Registry | None = None,
                 probe_timeout: float = DEFAULT_PROBE_TIMEOUT):
        self._lock = threading.RLock()
        self._services: dict[str, PoolService] = {}
        self._replicas: dict[str, list[ReplicaHandle]] = {}
        self._desired: dict[str, int] = {}
        self._registry = registry
        self.probe_timeout = probe_timeout

    def add_service(self, service: PoolService, desired: int | None = None):
        with self._lock:
            self._services[service.name] = service
            self._replicas.setdefault(service.name, [])
            self._desired[service.name] = desired if desired is not None else service.min_replicas

    def desired(self, name: str) -> int:
        with self._lock:
            return self._desired[name]

    def set_desired(self, name: str, count: int):
        with self._lock:
            service = self._services[name]
            if not service.min_replicas <= count <= service.max_replicas:
                raise ValueError(
                    f"desired={count} outside [{service.min_replicas}, {service.max_replicas}] for {name}"
                )
            self._desired[name] = count

    def replicas(self, name: str) -> list[ReplicaHandle]:
        with self._lock:
            return list(self._replicas.get(name, []))

    def healthy_endpoints(self, name: str) -> list[str]:
        with self._lock:
            return [r.endpoint for r in self._replicas.get(name, []) if r.health == HEALTH_HEALTHY]

    def counts(self) -> dict[str, int]:
        with self._lock:
            return {name: len(handles) for name, handles in self._replicas.items()}

    def _update_gauges(self, name: str):
        if self._registry is None:
            return
        self._registry.gauge_set("replicas_current", len(self._replicas[name]), {"service": name})
        self._registry.gauge_set("replicas_desired", self._desired[name], {"service": name})

    def _used_ports(self) -> set[int]:
        return {r.port for handles in self._replicas.values() for r in handles}

    def _fresh_port(self) -> int:
        from .httputil import free_port
        for _ in range(20):
            port = free_port()
            if port not in self._used_ports():
                return port
        raise SpawnError("could not allocate a free port")

    def reconcile(self, name: str | None = None) -> list[tuple[str, str, int]]:
        """Converge replica counts to desired; surplus stops newest-first.
        Idempotent at the fixed point. Returns the actions taken."""
        actions: list[tuple[str, str, int]] = []
        with self._lock:
            names = [name] if name else list(self._services)
            for svc_name in names:
                service = self._services[svc_name]
                handles = self._replicas[svc_name]
                want = self._desired[svc_name]
                while len(handles) < want:
                    port = self._fresh_port()
                    handle = start_replica(svc_name, service.kind, port, service.burn_ms)
                    handles.append(handle)
                    actions.append(("start", svc_name, port))
                if len(handles) > want:
                    handles.sort(key=lambda h: h.started_at)
                    for handle in handles[want:]:
                        stop_replica(handle)
                        actions.append(("stop", svc_name, handle.port))
                    del handles[want:]
                self._update_gauges(svc_name)
        for action in actions:
            log.info("reconcile: %s %s port=%d", *action)
        return actions

    def supervise_step(self, now: float | None = None) -> list[tuple[str, str, int]]:
        """One supervisor tick: probe every in-service replica concurrently,
        restart any that failed FAILURE_THRESHOLD probes in a row."""
        with self._lock:
            to_probe = [
                handle
                for svc_name, handles in self._replicas.items()
                for handle in handles[: self._desired[svc_name]]
                if handle.health != HEALTH_STOPPED
            ]
        if to_probe:
            with ThreadPoolExecutor(max_workers=min(8, len(to_probe))) as pool:
                results = list(pool.map(lambda h: probe(h, self.probe_timeout), to_probe))
        else:
            results = []
        actions: list[tuple[str, str, int]] = []
        with self._lock:
            for handle, ok in zip(to_probe, results):
                if ok:
                    handle.consecutive_failures = 0
                    handle.health = HEALTH_HEALTHY
                    continue
                handle.consecutive_failures += 1
                if handle.consecutive_failures >= FAILURE_THRESHOLD:
                    handle.health = HEALTH_UNRESPONSIVE
                    handles = self._replicas[handle.service_name]
                    if handle in handles:
                        service = self._services[handle.service_name]
                        stop_replica(handle)
                        idx = handles.index(handle)
                        port = self._fresh_port()
                        handles[idx] = start_replica(
                            handle.service_name, service.kind, port, service.burn_ms
                        )
                        actions.append(("restart", handle.service_name, port))
        for action in actions:
            log.warning("supervisor: %s %s port=%d", *action)
        return actions

    def stop_all(self):
        with self._lock:
            for handles in self._replicas.values():
                for handle in handles:
                    stop_replica(handle)
                handles.clear()


class Supervisor:
    """Background control loop driving supervise_step at a fixed interval."""

    def __init__(self, pool: ReplicaPool, interval: float = 1.0):
        self.pool = pool
        self.interval = interval
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self):
        self._thread = threading.Thread(target=self._run, name="supervisor", daemon=True)
        self._thread.start()

    def _run(self):
        while not self._stop.wait(self.interval):
            try:
                self.pool.supervise_step(time.time())
            except Exception:
                log.exception("supervisor step failed")

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
