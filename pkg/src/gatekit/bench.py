"""Load-benchmark engine: n requests, c concurrent workers, K repetitions.

Workers draw request indices from a shared counter (work stealing), so at
any instant the number in flight is min(c, remaining). The clock and the
HTTP client are injected: with SimClock plus a FakeClient the engine runs
deterministically in virtual time, which is how its math is tested; with
RealClock plus HttpClient it benches live targets.

Reported requests/second is n divided by first-dispatch-to-last-completion
wall time and includes failed requests.
"""
from __future__ import annotations

import http.client
import json
import math
import queue
import ssl
import statistics
import threading
import time
import urllib.parse
from dataclasses import dataclass, field

__all__ = [
    "BenchConfig",
    "BenchReport",
    "AggregateReport",
    "RequestRecord",
    "SimClock",
    "RealClock",
    "FakeClient",
    "HttpClient",
    "MatrixCell",
    "MatrixRow",
    "run_load",
    "run_repetitions",
    "aggregate",
    "run_matrix",
    "write_csv",
    "write_plot_data",
    "percentile",
]

CSV_HEADER = ["label", "replicas", "service", "mean_rps", "stddev_rps", "p50", "p99"]


@dataclass(frozen=True)
class BenchConfig:
    target_url: str
    n: int = 10
    c: int = 5
    repetitions: int = 100
    timeout_seconds: float = 10.0
    label: str = "bench"
    cert_file: str | None = None
    key_file: str | None = None
    ca_file: str | None = None

    def __post_init__(self):
        if not self.n >= self.c >= 1:
            raise ValueError(f"need n >= c >= 1, got n={self.n} c={self.c}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.timeout_seconds <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class RequestRecord:
    index: int
    start: float
    end: float
    status: int | None  # None means transport error

    @property
    def latency(self) -> float:
        return self.end - self.start


@dataclass
class BenchReport:
    label: str
    n: int
    c: int
    wall_seconds: float
    requests_per_second: float
    p50: float
    p90: float
    p99: float
    status_histogram: dict[int, int]
    errors: int
    records: list[RequestRecord] = field(default_factory=list, repr=False)


@dataclass
class AggregateReport:
    label: str
    runs: int
    mean_rps: float
    stddev_rps: float
    per_run_rps: list[float]
    mean_p50: float
    mean_p90: float
    mean_p99: float


# --- clocks ------------------------------------------------------------------

class RealClock:
    now = staticmethod(time.perf_counter)
    sleep = staticmethod(time.sleep)

    def register(self):
        pass

    def unregister(self):
        pass


class SimClock:
    """Deterministic virtual time shared by a fixed set of worker threads.

    Time advances only when every registered thread is blocked in sleep();
    then it jumps to the earliest wake time. Sleeping threads therefore
    rendezvous at each instant, which makes runs reproducible regardless of
    OS scheduling.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._time = 0.0
        self._active = 0
        self._sleepers: dict[int, float] = {}

    def register(self):
        with self._cond:
            self._active += 1

    def unregister(self):
        with self._cond:
            self._active -= 1
            self._maybe_advance()

    def now(self) -> float:
        with self._cond:
            return self._time

    def sleep(self, duration: float):
        me = threading.get_ident()
        with self._cond:
            self._sleepers[me] = self._time + duration
            self._maybe_advance()
            while me in self._sleepers:
                self._cond.wait()

    def _maybe_advance(self):
        if self._sleepers and len(self._sleepers) >= self._active:
            self._time = max(self._time, min(self._sleepers.values()))
            for tid in [t for t, wake in self._sleepers.items() if wake <= self._time]:
                del self._sleepers[tid]
            self._cond.notify_all()


# --- clients -----------------------------------------------------------------

@dataclass(frozen=True)
class Outcome:
    status: int | None


class FakeClient:
    """Deterministic client: request i takes latencies[i % len] of virtual
    time. Tracks in-flight concurrency for the cap property."""

    def __init__(self, clock: SimClock, latencies: list[float], status: int = 200):
        if not latencies:
            raise ValueError("need at least one latency")
        self.clock = clock
        self.latencies = latencies
        self.status = status
        self._lock = threading.Lock()
        self.inflight = 0
        self.max_inflight = 0

    def request(self, index: int) -> Outcome:
        with self._lock:
            self.inflight += 1
            self.max_inflight = max(self.max_inflight, self.inflight)
        self.clock.sleep(self.latencies[index % len(self.latencies)])
        with self._lock:
            self.inflight -= 1
        return Outcome(self.status)


class HttpClient:
    """Real HTTP(S) client over a pool of keep-alive connections.

    Connections are pooled rather than thread-local because the engine spawns
    fresh worker threads per run; pooling keeps TLS sessions warm across the
    K repetitions instead of paying c handshakes every run.
    """

    def __init__(self, config: BenchConfig):
        parsed = urllib.parse.urlsplit(config.target_url)
        if parsed.scheme not in ("http", "https"):
            raise ValueError(f"unsupported scheme in {config.target_url!r}")
        self.scheme = parsed.scheme
        self.host = parsed.hostname or "127.0.0.1"
        self.port = parsed.port or (443 if self.scheme == "https" else 80)
        self.path = parsed.path or "/"
        if parsed.query:
            self.path += "?" + parsed.query
        self.timeout = config.timeout_seconds
        self._pool: queue.SimpleQueue = queue.SimpleQueue()
        self._ssl_context: ssl.SSLContext | None = None
        if self.scheme == "https":
            context = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
            if config.ca_file:
                context.load_verify_locations(config.ca_file)
            else:
                context.check_hostname = False
                context.verify_mode = ssl.CERT_NONE
            if config.cert_file:
                context.load_cert_chain(config.cert_file, config.key_file)
            self._ssl_context = context

    def _connection(self) -> http.client.HTTPConnection:
        try:
            return self._pool.get_nowait()
        except queue.Empty:
            pass
        if self._ssl_context is not None:
            return http.client.HTTPSConnection(
                self.host, self.port, timeout=self.timeout, context=self._ssl_context
            )
        return http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)

    def request(self, index: int) -> Outcome:
        for attempt in (0, 1):
            conn = self._connection()
            try:
                conn.request("GET", self.path)
                resp = conn.getresponse()
                resp.read()
                self._pool.put(conn)
                return Outcome(resp.status)
            except Exception:
                try:
                    conn.close()
                except OSError:
                    pass
                if attempt == 1:
                    return Outcome(None)
        return Outcome(None)


# --- engine ------------------------------------------------------------------

def percentile(sorted_values: list[float], fraction: float) -> float:
    """Nearest-rank percentile on an already sorted list."""
    if not sorted_values:
        return 0.0
    rank = math.ceil(fraction * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


def run_load(config: BenchConfig, client, clock) -> BenchReport:
    """One run: exactly n requests, at most c in flight."""
    counter_lock = threading.Lock()
    next_index = [0]
    records: list[RequestRecord] = []
    records_lock = threading.Lock()

    def draw() -> int:
        with counter_lock:
            index = next_index[0]
            next_index[0] += 1
            return index

    def worker():
        try:
            while True:
                index = draw()
                if index >= config.n:
                    return
                start = clock.now()
                outcome = client.request(index)
                end = clock.now()
                with records_lock:
                    records.append(RequestRecord(index, start, end, outcome.status))
        finally:
            clock.unregister()

    # All workers are registered before any thread runs, so a virtual clock
    # cannot advance until every worker is blocked in its first request.
    for _ in range(config.c):
        clock.register()
    threads = [threading.Thread(target=worker, name=f"bench-{i}") for i in range(config.c)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert len(records) == config.n
    wall = max(r.end for r in records) - min(r.start for r in records)
    rps = config.n / wall if wall > 0 else float("inf")
    status_histogram: dict[int, int] = {}
    errors = 0
    for record in records:
        if record.status is None:
            errors += 1
        else:
            status_histogram[record.status] = status_histogram.get(record.status, 0) + 1
    latencies = sorted(r.latency for r in records)
    return BenchReport(
        label=config.label,
        n=config.n,
        c=config.c,
        wall_seconds=wall,
        requests_per_second=rps,
        p50=percentile(latencies, 0.50),
        p90=percentile(latencies, 0.90),
        p99=percentile(latencies, 0.99),
        status_histogram=status_histogram,
        errors=errors,
        records=records,
    )


def run_repetitions(config: BenchConfig, client, clock, warmup: int = 0) -> list[BenchReport]:
    """K sequential runs (sequential so runs never self-interfere); optional
    unrecorded warmup runs to fill connection caches."""
    for _ in range(warmup):
        run_load(config, client, clock)
    return [run_load(config, client, clock) for _ in range(config.repetitions)]


def aggregate(reports: list[BenchReport]) -> AggregateReport:
    if not reports:
        raise ValueError("cannot aggregate zero reports")
    labels = {r.label for r in reports}
    if len(labels) != 1:
        raise ValueError(f"cannot aggregate mixed labels {sorted(labels)}")
    rps = [r.requests_per_second for r in reports]
    return AggregateReport(
        label=reports[0].label,
        runs=len(reports),
        mean_rps=statistics.fmean(rps),
        stddev_rps=statistics.stdev(rps) if len(rps) > 1 else 0.0,
        per_run_rps=rps,
        mean_p50=statistics.fmean(r.p50 for r in reports),
        mean_p90=statistics.fmean(r.p90 for r in reports),
        mean_p99=statistics.fmean(r.p99 for r in reports),
    )


# --- comparison matrix ---------------------------------------------------------

@dataclass(frozen=True)
class MatrixCell:
    service: str
    replicas: int
    config: BenchConfig


@dataclass
class MatrixRow:
    label: str
    replicas: int
    service: str
    mean_rps: float
    stddev_rps: float
    p50: float
    p99: float
    error: str | None = None


def run_matrix(
    cells: list[MatrixCell],
    set_replicas,
    client_factory=None,
    clock=None,
    warmup: int = 1,
) -> list[MatrixRow]:
    """Run every cell in order, reconfiguring the replica pool between cells.

    A failing cell is recorded with its error and the matrix continues.
    """
    clock = clock or RealClock()
    client_factory = client_factory or HttpClient
    rows: list[MatrixRow] = []
    for cell in cells:
        try:
            set_replicas(cell.service, cell.replicas)
            client = client_factory(cell.config)
            reports = run_repetitions(cell.config, client, clock, warmup=warmup)
            agg = aggregate(reports)
            rows.append(MatrixRow(
                label=cell.config.label,
                replicas=cell.replicas,
                service=cell.service,
                mean_rps=agg.mean_rps,
                stddev_rps=agg.stddev_rps,
                p50=agg.mean_p50,
                p99=agg.mean_p99,
            ))
        except Exception as exc:  # record and continue with the next cell
            rows.append(MatrixRow(
                label=cell.config.label, replicas=cell.replicas, service=cell.service,
                mean_rps=0.0, stddev_rps=0.0, p50=0.0, p99=0.0, error=str(exc),
            ))
    return rows


def load_scenario(text: str, base_url: str | None = None) -> list[MatrixCell]:
    """Scenario file: JSON list of cells
    {"service", "replicas", "url"?, "n"?, "c"?, "k"?, "label"?}."""
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise ValueError("scenario file must be a JSON list")
    cells = []
    for entry in doc:
        url = entry.get("url", base_url)
        if not url:
            raise ValueError(f"scenario cell {entry!r} needs a url")
        config = BenchConfig(
            target_url=url,
            n=entry.get("n", 10),
            c=entry.get("c", 5),
            repetitions=entry.get("k", 100),
            label=entry.get("label", entry["service"]),
        )
        cells.append(MatrixCell(service=entry["service"], replicas=entry["replicas"], config=config))
    return cells


def write_csv(rows: list[MatrixRow], path: str):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([
                row.label, row.replicas, row.service,
                f"{row.mean_rps:.6g}", f"{row.stddev_rps:.6g}",
                f"{row.p50:.6g}", f"{row.p99:.6g}",
            ])


def write_plot_data(rows: list[MatrixRow], path: str):
    """Gnuplot-ready whitespace-delimited data with a comment header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(CSV_HEADER) + "\n")
        for row in rows:
            fh.write(
                f"{row.label} {row.replicas} {row.service} "
                f"{row.mean_rps:.6g} {row.stddev_rps:.6g} {row.p50:.6g} {row.p99:.6g}\n"
            )
