"""In-process metric registry with Prometheus text exposition rendering.

Every server component exposes its registry on GET /metrics; the autoscaler
reads those endpoints back through :func:`scrape`. The renderer and the
parser are exact inverses for counters and gauges so that a scrape of our
own output loses nothing.
"""
from __future__ import annotations

import math
import re
import threading
import urllib.request
from dataclasses import dataclass, field

__all__ = [
    "MetricSample",
    "Registry",
    "MetricsError",
    "ExpositionParseError",
    "ScrapeError",
    "render",
    "parse_exposition",
    "scrape",
    "DEFAULT_BUCKETS",
]

# Histogram buckets in seconds, used for all latency histograms.
DEFAULT_BUCKETS = (0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0)

_NAME_RE = re.compile(r"[a-zA-Z_:][a-zA-Z0-9_:]*\Z")
_LABEL_KEY_RE = re.compile(r"[a-zA-Z_][a-zA-Z0-9_]*\Z")

CONTENT_TYPE = "text/plain; version=0.0.4; charset=utf-8"


class MetricsError(ValueError):
    """Invalid metric name, label, or value."""


class ExpositionParseError(MetricsError):
    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class ScrapeError(RuntimeError):
    """Scrape target unreachable or returned a non-200 response."""


@dataclass(frozen=True)
class MetricSample:
    name: str
    labels: tuple[tuple[str, str], ...]
    value: float
    kind: str  # counter | gauge | histogram

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise MetricsError(f"invalid metric name {self.name!r}")
        for key, _ in self.labels:
            if not _LABEL_KEY_RE.match(key):
                raise MetricsError(f"invalid label key {key!r} on {self.name}")
        if not math.isfinite(self.value):
            raise MetricsError(f"non-finite value for {self.name}")
        if self.kind not in ("counter", "gauge", "histogram"):
            raise MetricsError(f"unknown metric kind {self.kind!r}")


def _labels_tuple(labels: dict[str, str] | None) -> tuple[tuple[str, str], ...]:
    if not labels:
        return ()
    return tuple(sorted((str(k), str(v)) for k, v in labels.items()))


@dataclass
class _Histogram:
    buckets: tuple[float, ...]
    counts: list[int] = field(default_factory=list)
    total: float = 0.0
    count: int = 0

    def __post_init__(self):
        if not self.counts:
            self.counts = [0] * len(self.buckets)

    def observe(self, value: float):
        for i, bound in enumerate(self.buckets):
            if value <= bound:
                self.counts[i] += 1
        self.total += value
        self.count += 1


class Registry:
    """Thread-safe metric store.

    Counters and gauges are keyed by (name, labels); histograms additionally
    carry fixed buckets chosen at first registration.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._kinds: dict[str, str] = {}
        self._values: dict[tuple[str, tuple], float] = {}
        self._histograms: dict[tuple[str, tuple], _Histogram] = {}
        self._buckets: dict[str, tuple[float, ...]] = {}

    def _check_kind(self, name: str, kind: str):
        if not _NAME_RE.match(name):
            raise MetricsError(f"invalid metric name {name!r}")
        existing = self._kinds.get(name)
        if existing is None:
            self._kinds[name] = kind
        elif existing != kind:
            raise MetricsError(f"metric {name} already registered as {existing}")

    def counter_add(self, name: str, amount: float = 1.0, labels: dict[str, str] | None = None):
        if amount < 0:
            raise MetricsError(f"counter {name} cannot decrease")
        lt = _labels_tuple(labels)
        with self._lock:
            self._check_kind(name, "counter")
            self._values[(name, lt)] = self._values.get((name, lt), 0.0) + amount

    def gauge_set(self, name: str, value: float, labels: dict[str, str] | None = None):
        if not math.isfinite(value):
            raise MetricsError(f"non-finite value for {name}")
        lt = _labels_tuple(labels)
        with self._lock:
            self._check_kind(name, "gauge")
            self._values[(name, lt)] = float(value)

    def gauge_add(self, name: str, delta: float, labels: dict[str, str] | None = None):
        lt = _labels_tuple(labels)
        with self._lock:
            self._check_kind(name, "gauge")
            self._values[(name, lt)] = self._values.get((name, lt), 0.0) + delta

    def histogram_observe(
        self,
        name: str,
        value: float,
        labels: dict[str, str] | None = None,
        buckets: tuple[float, ...] = DEFAULT_BUCKETS,
    ):
        if not math.isfinite(value):
            raise MetricsError(f"non-finite value for {name}")
        lt = _labels_tuple(labels)
        with self._lock:
            self._check_kind(name, "histogram")
            bounds = self._buckets.setdefault(name, tuple(buckets))
            hist = self._histograms.get((name, lt))
            if hist is None:
                hist = self._histograms[(name, lt)] = _Histogram(bounds)
            hist.observe(value)

    def record(self, sample: MetricSample):
        """Apply one sample: counters add, gauges set, histograms observe."""
        if sample.kind == "counter":
            self.counter_add(sample.name, sample.value, dict(sample.labels))
        elif sample.kind == "gauge":
            self.gauge_set(sample.name, sample.value, dict(sample.labels))
        else:
            self.histogram_observe(sample.name, sample.value, dict(sample.labels))

    def value(self, name: str, labels: dict[str, str] | None = None) -> float:
        with self._lock:
            return self._values.get((name, _labels_tuple(labels)), 0.0)

    def samples(self) -> list[MetricSample]:
        """Consistent snapshot; histograms expand to bucket/sum/count series."""
        out: list[MetricSample] = []
        with self._lock:
            for (name, lt), value in self._values.items():
                out.append(MetricSample(name, lt, value, self._kinds[name]))
            for (name, lt), hist in self._histograms.items():
                for bound, count in zip(hist.buckets, hist.counts):
                    blabels = lt + (("le", _format_value(bound)),)
                    out.append(MetricSample(name + "_bucket", _labels_tuple(dict(blabels)), float(count), "histogram"))
                inf_labels = _labels_tuple(dict(lt + (("le", "+Inf"),)))
                out.append(MetricSample(name + "_bucket", inf_labels, float(hist.count), "histogram"))
                out.append(MetricSample(name + "_sum", lt, hist.total, "histogram"))
                out.append(MetricSample(name + "_count", lt, float(hist.count), "histogram"))
        out.sort(key=lambda s: (s.name, s.labels))
        return out


def _format_value(value: float) -> str:
    if value == float("inf"):
        return "+Inf"
    if float(value).is_integer() and abs(value) < 2**53:
        return str(int(value))
    return repr(float(value))


def _escape_label(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def render(registry: Registry) -> str:
    """Prometheus text exposition format v0.0.4, deterministically ordered."""
    samples = registry.samples()
    # Group histogram series under their base metric for the TYPE line.
    lines: list[str] = []
    typed: set[str] = set()
    for sample in samples:
        base = sample.name
        if sample.kind == "histogram":
            for suffix in ("_bucket", "_sum", "_count"):
                if base.endswith(suffix):
                    base = base[: -len(suffix)]
                    break
        if base not in typed:
            lines.append(f"# TYPE {base} {sample.kind}")
            typed.add(base)
        if sample.labels:
            body = ",".join(f'{k}="{_escape_label(v)}"' for k, v in sample.labels)
            lines.append(f"{sample.name}{{{body}}} {_format_value(sample.value)}")
        else:
            lines.append(f"{sample.name} {_format_value(sample.value)}")
    if not lines:
        return ""
    return "\n".join(lines) + "\n"


_SAMPLE_RE = re.compile(
    r"(?P<name>[a-zA-Z_:][a-zA-Z0-9_:]*)"
    r"(?:\{(?P<labels>.*)\})?"
    r"\s+(?P<value>\S+)"
    r"(?:\s+(?P<ts>-?\d+))?\s*\Z"
)
_LABEL_RE = re.compile(r'\s*(?P<key>[a-zA-Z_][a-zA-Z0-9_]*)="(?P<val>(?:\\.|[^"\\])*)"\s*(?:,|\Z)')


def _unescape_label(value: str) -> str:
    return value.replace("\\n", "\n").replace('\\"', '"').replace("\\\\", "\\")


def parse_exposition(text: str) -> list[MetricSample]:
    """Parse exposition text back into samples.

    Histogram child series (_bucket/_sum/_count) keep kind "histogram" when a
    TYPE line declared the base metric; untyped samples default to gauge.
    """
    samples: list[MetricSample] = []
    kinds: dict[str, str] = {}
    # Split on "\n" only: label values may legally contain other characters
    # that str.splitlines would treat as line boundaries.
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line.split(None, 3)
            if len(parts) >= 4 and parts[1] == "TYPE":
                kinds[parts[2]] = parts[3].strip()
            continue
        match = _SAMPLE_RE.match(line)
        if not match:
            raise ExpositionParseError(f"malformed sample {line!r}", lineno)
        name = match.group("name")
        labels: dict[str, str] = {}
        label_body = match.group("labels")
        if label_body:
            pos = 0
            while pos < len(label_body):
                lm = _LABEL_RE.match(label_body, pos)
                if not lm:
                    raise ExpositionParseError(f"malformed labels {label_body!r}", lineno)
                labels[lm.group("key")] = _unescape_label(lm.group("val"))
                pos = lm.end()
        try:
            if match.group("value") == "+Inf":
                value = float("inf")
            else:
                value = float(match.group("value"))
        except ValueError:
            raise ExpositionParseError(f"bad value {match.group('value')!r}", lineno) from None
        kind = kinds.get(name)
        if kind is None:
            for suffix in ("_bucket", "_sum", "_count"):
                if name.endswith(suffix) and kinds.get(name[: -len(suffix)]) == "histogram":
                    kind = "histogram"
                    break
        if kind is None:
            kind = "gauge"
        samples.append(MetricSample(name, _labels_tuple(labels), value, kind))
    return samples


def scrape(url: str, timeout: float = 5.0) -> list[MetricSample]:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            if resp.status != 200:
                raise ScrapeError(f"{url} returned {resp.status}")
            body = resp.read().decode("utf-8")
    except ScrapeError:
        raise
    except Exception as exc:
        raise ScrapeError(f"scrape of {url} failed: {exc}") from exc
    return parse_exposition(body)
