"""gatekit command line: one multi-call binary for every component.

Subcommands: frontend, backend, workload, autoscale, bench, demo, validate.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import random
import signal
import sys
import threading
import time

from . import __version__

log = logging.getLogger("gatekit.cli")

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}


def _setup_logging():
    level = _LOG_LEVELS.get(os.environ.get("GATEKIT_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )


def _load_secret(args) -> bytes:
    from .signing import check_secret

    env = os.environ.get("GATEKIT_ORIGIN_SECRET")
    if env:
        return check_secret(env.encode("utf-8"))
    path = getattr(args, "origin_secret_file", None)
    if not path:
        raise SystemExit("origin secret required: --origin-secret-file or GATEKIT_ORIGIN_SECRET")
    with open(path, "rb") as fh:
        return check_secret(fh.read().strip())


def _listen_addr(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def _serve_until_interrupted(*servers):
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    threads = []
    for server in servers:
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        threads.append(thread)
    while not stop.wait(0.2):
        pass
    for server in servers:
        server.shutdown()
        server.server_close()


# --- subcommands ---------------------------------------------------------------

def cmd_frontend(args) -> int:
    from .auth import load_auth_policy
    from .frontend import FrontendServer, GatewayApp, make_ssl_context
    from .topology import build_routing_table, load_topology_file

    secret = _load_secret(args)
    policy = load_auth_policy(args.auth_policy, origin_secret=secret)
    topology = load_topology_file(args.topology)
    app = GatewayApp(
        table=build_routing_table(topology),
        policy=policy,
        rng=random.Random(args.seed),
        upstream_timeout=args.upstream_timeout,
    )
    context = None
    if args.cert:
        context = make_ssl_context(args.cert, args.key, args.ca or args.cert,
                                   require_client_cert=args.require_client_cert)
    server = FrontendServer(_listen_addr(args.listen), app, context)

    def reload_topology(signum=None, frame=None):
        try:
            app.swap_table(build_routing_table(load_topology_file(args.topology)))
            log.info("topology reloaded, generation=%d", app.table.generation)
        except Exception:
            log.exception("topology reload failed; keeping previous table")

    signal.signal(signal.SIGHUP, reload_topology)
    if args.watch:
        def watch():
            last = os.path.getmtime(args.topology)
            while True:
                time.sleep(1.0)
                try:
                    mtime = os.path.getmtime(args.topology)
                except OSError:
                    continue
                if mtime != last:
                    last = mtime
                    reload_topology()
        threading.Thread(target=watch, daemon=True).start()
    log.info("frontend listening on %s (tls=%s)", args.listen, context is not None)
    _serve_until_interrupted(server)
    return 0


def cmd_backend(args) -> int:
    from .ingress import AdmissionState, BackendApp, BackendServer, OriginConfig
    from .metrics import Registry
    from .topology import build_routing_table, load_topology_file
    from .workload import PoolService, ReplicaPool, Supervisor

    secret = _load_secret(args)
    topology = load_topology_file(args.topology)
    registry = Registry()
    pool = ReplicaPool(registry=registry)
    for spec in topology.services:
        if spec.is_legacy:
            continue
        pool.add_service(PoolService(spec.name, spec.kind, spec.burn_ms or 0,
                                     spec.min_replicas, spec.max_replicas))
    app = BackendApp(
        table=build_routing_table(topology),
        pool=pool,
        origin=OriginConfig(
            origin_secret=secret,
            allowed_peers=tuple(args.allowed_peers.split(",")),
        ),
        registry=registry,
    )
    server = BackendServer(_listen_addr(args.listen), app,
                           AdmissionState(args.connection_limit))
    pool.reconcile()
    supervisor = Supervisor(pool, interval=args.probe_interval)
    supervisor.start()
    log.info("backend ingress listening on %s, %d services", args.listen,
             len(pool.counts()))
    try:
        _serve_until_interrupted(server)
    finally:
        supervisor.stop()
        pool.stop_all()
    return 0


def cmd_workload(args) -> int:
    from .workload import run_workload

    run_workload(args.kind, args.port, args.burn_ms)
    return 0


def cmd_autoscale(args) -> int:
    from .autoscaler import AutoscalerState, control_step, load_policies
    from .metrics import ScrapeError, scrape

    with open(args.policies, "r", encoding="utf-8") as fh:
        policies = load_policies(fh.read())
    state = AutoscalerState()
    secret = None if args.dry_run else _load_secret(args)
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda s, f: stop.set())

    def evaluate():
        try:
            samples = scrape(args.scrape_url, timeout=5.0)
        except ScrapeError as exc:
            log.warning("scrape failed: %s", exc)
            samples = []
        current = {}
        for sample in samples:
            if sample.name == "replicas_current":
                current[dict(sample.labels).get("service", "")] = int(sample.value)
        decisions = control_step(state, samples, policies, current)
        for decision in decisions:
            print(json.dumps({
                "service": decision.service_name,
                "current": decision.current,
                "desired": decision.desired,
                "reason": decision.reason,
            }))
            if not args.dry_run and decision.desired != decision.current:
                _apply_scale(args.scrape_url, secret, decision)

    if args.once:
        evaluate()
        return 0
    interval = min((p.evaluation_interval_seconds for p in policies), default=10.0)
    while not stop.wait(interval):
        evaluate()
    return 0


def _apply_scale(scrape_url: str, secret: bytes, decision):
    """Actuate a decision via the backend's signed control endpoint."""
    import urllib.parse

    from .httputil import new_conn_cache, proxy_request
    from .signing import ORIGIN_SIG_HEADER, ORIGIN_TIME_HEADER, sign_request

    parsed = urllib.parse.urlsplit(scrape_url)
    target = f"{parsed.hostname}:{parsed.port}"
    timestamp = int(time.time())
    path = "/admin/scale"
    headers = {
        ORIGIN_TIME_HEADER: str(timestamp),
        ORIGIN_SIG_HEADER: sign_request(secret, "POST", path, timestamp),
        "Content-Type": "application/json",
    }
    body = json.dumps({"service": decision.service_name, "desired": decision.desired}).encode()
    resp = proxy_request(new_conn_cache(), target, "POST", path, headers, body, timeout=30.0)
    if resp.status != 200:
        log.error("scale actuation failed: %d %s", resp.status, resp.body.decode(errors="replace"))
    else:
        log.info("scaled %s to %d", decision.service_name, decision.desired)


def cmd_bench(args) -> int:
    from .bench import (BenchConfig, HttpClient, RealClock, aggregate,
                        run_repetitions, write_csv, write_plot_data)

    config = BenchConfig(
        target_url=args.url, n=args.n, c=args.c, repetitions=args.k,
        timeout_seconds=args.timeout, label=args.label,
        cert_file=args.cert, key_file=args.key, ca_file=args.ca,
    )
    reports = run_repetitions(config, HttpClient(config), RealClock(), warmup=args.warmup)
    agg = aggregate(reports)
    failures = sum(r.errors for r in reports)
    statuses: dict[int, int] = {}
    for report in reports:
        for code, count in report.status_histogram.items():
            statuses[code] = statuses.get(code, 0) + count
    print(json.dumps({
        "label": agg.label, "runs": agg.runs,
        "mean_rps": agg.mean_rps, "stddev_rps": agg.stddev_rps,
        "mean_p50": agg.mean_p50, "mean_p90": agg.mean_p90, "mean_p99": agg.mean_p99,
        "status_histogram": {str(k): v for k, v in sorted(statuses.items())},
        "errors": failures,
    }, indent=2))
    if args.csv or args.plot_data:
        from .bench import MatrixRow
        rows = [MatrixRow(label=agg.label, replicas=0, service=agg.label,
                          mean_rps=agg.mean_rps, stddev_rps=agg.stddev_rps,
                          p50=agg.mean_p50, p99=agg.mean_p99)]
        if args.csv:
            write_csv(rows, args.csv)
        if args.plot_data:
            write_plot_data(rows, args.plot_data)
    return 0  # request failures are data, not harness errors


def cmd_demo(args) -> int:
    from .demo import DemoStack, run_demo_scenario

    workdir = args.workdir or os.path.join(os.getcwd(), "demo-out")
    if args.serve:
        stack = DemoStack(workdir, burn_ms=args.burn_ms, seed=args.seed)
        stack.start()
        print(f"frontend:  {stack.frontend_url}  (mTLS; client cert in {workdir})")
        print(f"backend:   http://127.0.0.1:{stack.backend_port}")
        print(f"legacy VM: http://127.0.0.1:{stack.legacy_port}")
        print("services:  /echo /burn /kv /couchdb   (Ctrl-C to stop)")
        stop = threading.Event()
        signal.signal(signal.SIGINT, lambda s, f: stop.set())
        signal.signal(signal.SIGTERM, lambda s, f: stop.set())
        try:
            while not stop.wait(0.5):
                pass
        finally:
            stack.stop()
        return 0
    replicas = tuple(int(r) for r in args.replicas.split(","))
    outputs = run_demo_scenario(
        workdir, replicas=replicas, n=args.n, c=args.c,
        repetitions=args.k, burn_ms=args.burn_ms, seed=args.seed,
    )
    for kind, path in outputs.items():
        print(f"{kind}: {path}")
    return 0


def cmd_validate(args) -> int:
    from .topology import TopologyError, load_topology_file

    status = 0
    try:
        topology = load_topology_file(args.topology)
        print(f"topology ok: {len(topology.services)} services")
    except (OSError, TopologyError) as exc:
        print(f"topology invalid: {exc}", file=sys.stderr)
        status = 1
    if args.policies:
        from .autoscaler import PolicyFileError, load_policies
        try:
            with open(args.policies, "r", encoding="utf-8") as fh:
                policies = load_policies(fh.read())
            print(f"scale policies ok: {len(policies)} policies")
        except (OSError, PolicyFileError) as exc:
            print(f"scale policies invalid: {exc}", file=sys.stderr)
            status = 1
    if args.auth_policy:
        from .auth import PolicyError, load_auth_policy
        try:
            policy = load_auth_policy(args.auth_policy)
            print(f"auth policy ok: {len(policy.trusted_roots)} trusted roots, "
                  f"{len(policy.dn_role_rules)} role rules")
        except PolicyError as exc:
            print(f"auth policy invalid: {exc}", file=sys.stderr)
            status = 1
    return status


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatekit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gatekit {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("frontend", help="mTLS-authenticating gateway")
    p.add_argument("--listen", default="127.0.0.1:8443")
    p.add_argument("--topology", required=True)
    p.add_argument("--auth-policy", required=True)
    p.add_argument("--origin-secret-file")
    p.add_argument("--cert", help="server certificate PEM (TLS enabled when set)")
    p.add_argument("--key", help="server key PEM")
    p.add_argument("--ca", help="client-certificate CA bundle")
    p.add_argument("--require-client-cert", action="store_true")
    p.add_argument("--upstream-timeout", type=float, default=10.0)
    p.add_argument("--seed", type=int, help="seed for canary track draws")
    p.add_argument("--watch", action="store_true", help="reload topology on file change")
    p.set_defaults(func=cmd_frontend)

    p = sub.add_parser("backend", help="origin-restricted backend ingress + replica pool")
    p.add_argument("--listen", default="127.0.0.1:8088")
    p.add_argument("--topology", required=True)
    p.add_argument("--origin-secret-file")
    p.add_argument("--connection-limit", type=int, default=1024)
    p.add_argument("--allowed-peers", default="127.")
    p.add_argument("--probe-interval", type=float, default=1.0)
    p.set_defaults(func=cmd_backend)

    p = sub.add_parser("workload", help="run one stub service replica")
    p.add_argument("--kind", choices=["echo", "burn", "stateful"], required=True)
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--burn-ms", type=int, default=0)
    p.set_defaults(func=cmd_workload)

    p = sub.add_parser("autoscale", help="metric-driven replica autoscaler")
    p.add_argument("--policies", required=True)
    p.add_argument("--scrape-url", required=True)
    p.add_argument("--origin-secret-file")
    p.add_argument("--dry-run", action="store_true", help="print decisions, apply nothing")
    p.add_argument("--once", action="store_true", help="single evaluation, then exit")
    p.set_defaults(func=cmd_autoscale)

    p = sub.add_parser("bench", help="load benchmark (n requests, c workers, K runs)")
    p.add_argument("--url", required=True)
    p.add_argument("-n", type=int, default=10, help="requests per run")
    p.add_argument("-c", type=int, default=5, help="concurrent workers")
    p.add_argument("-k", type=int, default=100, help="repetitions")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--label", default="bench")
    p.add_argument("--cert")
    p.add_argument("--key")
    p.add_argument("--ca")
    p.add_argument("--csv")
    p.add_argument("--plot-data")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("demo", help="full stack on loopback")
    p.add_argument("--workdir")
    p.add_argument("--serve", action="store_true",
                   help="keep the stack running instead of benchmarking")
    p.add_argument("--burn-ms", type=int, default=20)
    p.add_argument("--replicas", default="4,6,8")
    p.add_argument("-n", type=int, default=10)
    p.add_argument("-c", type=int, default=5)
    p.add_argument("-k", type=int, default=20, help="repetitions per cell (use 100 for full runs)")
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("validate", help="lint topology and policy files")
    p.add_argument("--topology", required=True)
    p.add_argument("--policies")
    p.add_argument("--auth-policy")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except SystemExit:
        raise
    except Exception as exc:
        log.error("%s", exc, exc_info=os.environ.get("GATEKIT_LOG") == "debug")
        return 1


if __name__ == "__main__":
    sys.exit(main())
