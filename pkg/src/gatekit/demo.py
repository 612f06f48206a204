"""Demo stack orchestration: the whole architecture on loopback.

Boots frontend gateway (mTLS), backend ingress, a supervised replica pool,
and a standalone "VM" process for the legacy service, all on free loopback
ports with freshly generated certificates and origin secret. Also drives
the replica-sweep benchmark scenario end to end.
"""
from __future__ import annotations

import json
import logging
import os
import random
import secrets
import threading
import time

from . import certs
from .auth import AuthPolicy
from .bench import BenchConfig, MatrixCell, run_matrix, write_csv, write_plot_data
from .frontend import FrontendServer, GatewayApp, make_ssl_context
from .httputil import free_port
from .ingress import AdmissionState, BackendApp, BackendServer, OriginConfig
from .metrics import Registry
from .topology import ServiceSpec, Topology, build_routing_table
from .workload import PoolService, ReplicaPool, Supervisor, start_replica, stop_replica

log = logging.getLogger("gatekit.demo")

DEFAULT_SWEEP = (4, 6, 8)


class DemoStack:
    """Full loopback deployment; start() returns once everything is healthy."""

    def __init__(self, workdir: str, burn_ms: int = 20, seed: int | None = None,
                 connection_limit: int = 1024, echo_replicas: int = 2,
                 stateful_replicas: int = 2, max_burn_replicas: int = 16,
                 probe_interval: float = 3.0):
        self.workdir = workdir
        os.makedirs(workdir, exist_ok=True)
        self.burn_ms = burn_ms
        self.origin_secret = secrets.token_bytes(48)
        self.secret_file = os.path.join(workdir, "origin-secret")
        with open(self.secret_file, "wb") as fh:
            fh.write(self.origin_secret)

        self.ca = certs.make_ca()
        self.server_cert = certs.make_leaf(self.ca, "localhost", server=True)
        self.client_cert = certs.make_leaf(self.ca, "demo-client")
        self.ca_file = os.path.join(workdir, "ca.pem")
        with open(self.ca_file, "wb") as fh:
            fh.write(self.ca.cert_pem)
        self.server_cert.write(os.path.join(workdir, "server.pem"),
                               os.path.join(workdir, "server.key"))
        self.client_cert.write(os.path.join(workdir, "client.pem"),
                               os.path.join(workdir, "client.key"))
        self.client_cert_file = os.path.join(workdir, "client.pem")
        self.client_key_file = os.path.join(workdir, "client.key")

        self.frontend_port = free_port()
        self.backend_port = free_port()
        self.legacy_port = free_port()
        backend_addr = f"127.0.0.1:{self.backend_port}"

        services = [
            ServiceSpec(name="echo", path_prefix="/echo", kind="echo",
                        min_replicas=1, max_replicas=8,
                        tracks=(_stable_track(backend_addr),)),
            ServiceSpec(name="burn", path_prefix="/burn", kind="burn", burn_ms=burn_ms,
                        min_replicas=1, max_replicas=max_burn_replicas,
                        tracks=(_stable_track(backend_addr),)),
            ServiceSpec(name="kv", path_prefix="/kv", kind="stateful",
                        min_replicas=1, max_replicas=4,
                        tracks=(_stable_track(backend_addr),)),
            ServiceSpec(name="couchdb", path_prefix="/couchdb",
                        legacy_endpoint=f"127.0.0.1:{self.legacy_port}"),
        ]
        self.topology = Topology(services=tuple(services))

        policy = AuthPolicy(
            trusted_roots=[self.ca.cert],
            dn_role_rules=[("*CN=demo-client", "operator")],
            origin_secret=self.origin_secret,
        )
        rng = random.Random(seed)
        self.frontend_registry = Registry()
        self.gateway = GatewayApp(
            table=build_routing_table(self.topology),
            policy=policy,
            registry=self.frontend_registry,
            rng=rng,
        )
        self.backend_registry = Registry()
        self.pool = ReplicaPool(registry=self.backend_registry)
        self.pool.add_service(PoolService("echo", "echo", 0, 1, 8), desired=echo_replicas)
        self.pool.add_service(PoolService("burn", "burn", burn_ms, 1, max_burn_replicas), desired=1)
        self.pool.add_service(PoolService("kv", "stateful", 0, 1, 4), desired=stateful_replicas)
        self.backend_app = BackendApp(
            table=build_routing_table(self.topology),
            pool=self.pool,
            origin=OriginConfig(origin_secret=self.origin_secret),
            registry=self.backend_registry,
        )
        self.admission = AdmissionState(connection_limit=connection_limit)
        self.supervisor = Supervisor(self.pool, interval=probe_interval)
        self._servers: list = []
        self._threads: list[threading.Thread] = []
        self._legacy_handle = None

    @property
    def frontend_url(self) -> str:
        return f"https://127.0.0.1:{self.frontend_port}"

    def start(self):
        self._legacy_handle = start_replica("couchdb-vm", "echo", self.legacy_port)
        self.pool.reconcile()

        backend = BackendServer(("127.0.0.1", self.backend_port), self.backend_app, self.admission)
        context = make_ssl_context(
            os.path.join(self.workdir, "server.pem"),
            os.path.join(self.workdir, "server.key"),
            self.ca_file,
        )
        frontend = FrontendServer(("127.0.0.1", self.frontend_port), self.gateway, context)
        self._servers = [backend, frontend]
        for server in self._servers:
            thread = threading.Thread(target=server.serve_forever, daemon=True)
            thread.start()
            self._threads.append(thread)
        self.supervisor.start()
        log.info("demo stack up: frontend=%s backend=127.0.0.1:%d legacy=127.0.0.1:%d",
                 self.frontend_url, self.backend_port, self.legacy_port)

    def stop(self):
        self.supervisor.stop()
        for server in self._servers:
            server.shutdown()
            server.server_close()
        self.pool.stop_all()
        if self._legacy_handle is not None:
            stop_replica(self._legacy_handle)

    def set_replicas(self, service: str, count: int):
        self.pool.set_desired(service, count)
        self.pool.reconcile(service)

    def bench_config(self, path: str, label: str, n: int = 10, c: int = 5,
                     repetitions: int = 20) -> BenchConfig:
        return BenchConfig(
            target_url=self.frontend_url + path,
            n=n, c=c, repetitions=repetitions, label=label,
            cert_file=self.client_cert_file,
            key_file=self.client_key_file,
            ca_file=self.ca_file,
        )

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc_info):
        self.stop()


def _stable_track(endpoint: str):
    from .topology import ReleaseTrack
    return ReleaseTrack(label="stable", weight=1, endpoints=(endpoint,))


def run_demo_scenario(
    workdir: str,
    replicas: tuple[int, ...] = DEFAULT_SWEEP,
    n: int = 10,
    c: int = 5,
    repetitions: int = 20,
    burn_ms: int = 20,
    seed: int | None = 1,
    render_figure: bool = True,
) -> dict[str, str]:
    """Boot the stack, run the replica-sweep bench matrix on the burn
    service, write CSV + gnuplot data + figure, tear down. Returns the
    output paths."""
    started = time.time()
    outputs = {
        "csv": os.path.join(workdir, "replica_sweep.csv"),
        "plot_data": os.path.join(workdir, "replica_sweep.dat"),
        "figure": os.path.join(workdir, "replica_sweep.png"),
        "summary": os.path.join(workdir, "replica_sweep.json"),
    }
    with DemoStack(workdir, burn_ms=burn_ms, seed=seed) as stack:
        cells = [
            MatrixCell(
                service="burn",
                replicas=count,
                config=stack.bench_config(
                    "/burn/sweep", label=f"burn-r{count}", n=n, c=c, repetitions=repetitions
                ),
            )
            for count in replicas
        ]
        # Generous warmup: every (ingress thread, replica) connection pair
        # must be warm before measurement or cold TCP connects bias the
        # larger replica counts. Coupon-collector over 5x8 pairs needs a
        # couple hundred requests.
        rows = run_matrix(cells, stack.set_replicas, warmup=25)
    write_csv(rows, outputs["csv"])
    write_plot_data(rows, outputs["plot_data"])
    if render_figure:
        from .figures import render_matrix_figure
        render_matrix_figure(rows, outputs["figure"],
                             title=f"burn service, {burn_ms}ms per request, n={n} c={c} K={repetitions}")
    else:
        outputs.pop("figure")
    summary = {
        "elapsed_seconds": time.time() - started,
        "rows": [
            {"label": r.label, "replicas": r.replicas, "service": r.service,
             "mean_rps": r.mean_rps, "stddev_rps": r.stddev_rps,
             "p50": r.p50, "p99": r.p99, "error": r.error}
            for r in rows
        ],
    }
    with open(outputs["summary"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return outputs
