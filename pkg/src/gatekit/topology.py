"""Declarative service topology: parsing, strict validation, route resolution.

The topology document is JSON on purpose: the config format has no
significant whitespace, and every unknown key or malformed field is a hard
error so a typo cannot silently misroute production traffic.
"""
from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass

__all__ = [
    "ReleaseTrack",
    "ServiceSpec",
    "Topology",
    "TrackState",
    "RoutingTable",
    "RouteDecision",
    "TopologyError",
    "DuplicatePrefixError",
    "RouteNotFound",
    "load_topology",
    "build_routing_table",
    "match_service",
    "resolve_route",
    "next_endpoint",
]

WORKLOAD_KINDS = ("echo", "burn", "stateful")


class TopologyError(ValueError):
    """Invalid topology document; message names the offending service/field."""

    def __init__(self, message: str, service: str | None = None, field_name: str | None = None):
        where = ""
        if service:
            where = f"service {service!r}"
            if field_name:
                where += f", field {field_name!r}"
            where += ": "
        super().__init__(where + message)
        self.service = service
        self.field_name = field_name


class DuplicatePrefixError(TopologyError):
    pass


class RouteNotFound(LookupError):
    def __init__(self, path: str):
        super().__init__(f"no service prefix matches {path!r}")
        self.path = path


@dataclass(frozen=True)
class ReleaseTrack:
    label: str
    weight: int
    endpoints: tuple[str, ...]


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    path_prefix: str
    tracks: tuple[ReleaseTrack, ...] = ()
    legacy_endpoint: str | None = None
    min_replicas: int = 1
    max_replicas: int = 1
    burn_ms: int | None = None
    kind: str = "echo"
    required_roles: frozenset[str] = frozenset()

    @property
    def is_legacy(self) -> bool:
        return self.legacy_endpoint is not None


@dataclass(frozen=True)
class Topology:
    services: tuple[ServiceSpec, ...]

    def service(self, name: str) -> ServiceSpec:
        for spec in self.services:
            if spec.name == name:
                return spec
        raise KeyError(name)


class TrackState:
    """Round-robin cursor over one track's endpoints; the only mutable
    routing state, advanced under a lock so concurrent callers never skip
    or repeat a slot."""

    def __init__(self, endpoints: tuple[str, ...]):
        self.endpoints = endpoints
        self._lock = threading.Lock()
        self._next = 0

    def take(self) -> str:
        with self._lock:
            endpoint = self.endpoints[self._next % len(self.endpoints)]
            self._next += 1
        return endpoint


@dataclass(frozen=True)
class RouteDecision:
    service_name: str
    target: str
    is_legacy: bool
    track_label: str
    stripped_path: str


_generation = itertools.count(1)


class RoutingTable:
    """Immutable compiled topology: prefixes sorted longest-first, plus one
    TrackState per (service, track). Safe to share across request threads;
    reloads build a fresh table and swap the reference."""

    def __init__(self, topology: Topology):
        entries = sorted(
            ((spec.path_prefix, spec) for spec in topology.services),
            key=lambda item: (-len(item[0]), item[0]),
        )
        self.entries: tuple[tuple[str, ServiceSpec], ...] = tuple(entries)
        self.generation = next(_generation)
        self._track_state: dict[tuple[str, str], TrackState] = {}
        for spec in topology.services:
            for track in spec.tracks:
                self._track_state[(spec.name, track.label)] = TrackState(track.endpoints)

    def track_state(self, service_name: str, track_label: str) -> TrackState:
        return self._track_state[(service_name, track_label)]

    def __len__(self) -> int:
        return len(self.entries)


def _expect(doc: dict, key: str, types, service: str, default=None, required=False):
    if key not in doc:
        if required:
            raise TopologyError("missing required field", service, key)
        return default
    value = doc[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise TopologyError(f"expected {types}, got {type(value).__name__}", service, key)
    return value


def _parse_track(doc, service: str) -> ReleaseTrack:
    if not isinstance(doc, dict):
        raise TopologyError("track must be an object", service, "tracks")
    unknown = set(doc) - {"label", "weight", "endpoints"}
    if unknown:
        raise TopologyError(f"unknown track keys {sorted(unknown)}", service, "tracks")
    label = _expect(doc, "label", str, service, required=True)
    weight = _expect(doc, "weight", int, service, required=True)
    if weight < 0:
        raise TopologyError("track weight must be >= 0", service, "tracks")
    endpoints = _expect(doc, "endpoints", list, service, required=True)
    if not endpoints or not all(isinstance(e, str) and e for e in endpoints):
        raise TopologyError(f"track {label!r} needs a nonempty endpoint list", service, "tracks")
    return ReleaseTrack(label=label, weight=weight, endpoints=tuple(endpoints))


_SERVICE_KEYS = {
    "name", "path_prefix", "tracks", "legacy_endpoint",
    "min_replicas", "max_replicas", "burn_ms", "kind", "required_roles",
}


def _parse_service(doc) -> ServiceSpec:
    if not isinstance(doc, dict):
        raise TopologyError("service entry must be an object")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise TopologyError("service needs a nonempty string name")
    unknown = set(doc) - _SERVICE_KEYS
    if unknown:
        raise TopologyError(f"unknown keys {sorted(unknown)}", name)
    prefix = _expect(doc, "path_prefix", str, name, required=True)
    if not prefix.startswith("/"):
        raise TopologyError("must begin with '/'", name, "path_prefix")
    if prefix != "/" and prefix.endswith("/"):
        raise TopologyError("must not end with '/'", name, "path_prefix")
    tracks_doc = _expect(doc, "tracks", list, name, default=[])
    tracks = tuple(_parse_track(t, name) for t in tracks_doc)
    legacy = _expect(doc, "legacy_endpoint", str, name)
    if legacy is not None and tracks:
        raise TopologyError("legacy_endpoint and tracks are mutually exclusive", name, "legacy_endpoint")
    if legacy is None and not tracks:
        raise TopologyError("needs either tracks or a legacy_endpoint", name, "tracks")
    if tracks and sum(t.weight for t in tracks) <= 0:
        raise TopologyError("track weights must sum to a positive value", name, "tracks")
    labels = [t.label for t in tracks]
    if len(set(labels)) != len(labels):
        raise TopologyError("duplicate track labels", name, "tracks")
    min_replicas = _expect(doc, "min_replicas", int, name, default=1)
    max_replicas = _expect(doc, "max_replicas", int, name, default=max(min_replicas, 1))
    if min_replicas < 1 or max_replicas < 1:
        raise TopologyError("replica bounds must be positive", name, "min_replicas")
    if min_replicas > max_replicas:
        raise TopologyError(
            f"min_replicas={min_replicas} exceeds max_replicas={max_replicas}", name, "min_replicas"
        )
    burn_ms = _expect(doc, "burn_ms", int, name)
    if burn_ms is not None and burn_ms < 0:
        raise TopologyError("burn_ms must be >= 0", name, "burn_ms")
    kind = _expect(doc, "kind", str, name, default="echo")
    if kind not in WORKLOAD_KINDS:
        raise TopologyError(f"kind must be one of {WORKLOAD_KINDS}", name, "kind")
    roles_doc = _expect(doc, "required_roles", list, name, default=[])
    if not all(isinstance(r, str) and r for r in roles_doc):
        raise TopologyError("required_roles must be nonempty strings", name, "required_roles")
    return ServiceSpec(
        name=name,
        path_prefix=prefix,
        tracks=tracks,
        legacy_endpoint=legacy,
        min_replicas=min_replicas,
        max_replicas=max_replicas,
        burn_ms=burn_ms,
        kind=kind,
        required_roles=frozenset(roles_doc),
    )


def load_topology(config_text: str) -> Topology:
    """Parse and fully validate a topology document. Every invariant is
    checked here so later stages never see a bad table."""
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise TopologyError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise TopologyError("top level must be an object")
    unknown = set(doc) - {"services"}
    if unknown:
        raise TopologyError(f"unknown top-level keys {sorted(unknown)}")
    services_doc = doc.get("services")
    if not isinstance(services_doc, list):
        raise TopologyError("top-level 'services' array is required")
    services = tuple(_parse_service(s) for s in services_doc)
    seen_prefixes: dict[str, str] = {}
    seen_names: set[str] = set()
    for spec in services:
        if spec.name in seen_names:
            raise TopologyError("duplicate service name", spec.name, "name")
        seen_names.add(spec.name)
        if spec.path_prefix in seen_prefixes:
            raise DuplicatePrefixError(
                f"path_prefix {spec.path_prefix!r} already used by service {seen_prefixes[spec.path_prefix]!r}",
                spec.name,
                "path_prefix",
            )
        seen_prefixes[spec.path_prefix] = spec.name
    return Topology(services=services)


def load_topology_file(path: str) -> Topology:
    with open(path, "r", encoding="utf-8") as fh:
        return load_topology(fh.read())


def build_routing_table(topology: Topology) -> RoutingTable:
    return RoutingTable(topology)


def _prefix_matches(prefix: str, path: str) -> bool:
    # Segment-aware: "/db" matches "/db" and "/db/x" but never "/dbs/x".
    if prefix == "/":
        return path.startswith("/")
    return path == prefix or path.startswith(prefix + "/")


def match_service(table: RoutingTable, path: str) -> ServiceSpec:
    """Longest-prefix match; entries are pre-sorted so the first hit wins."""
    for prefix, spec in table.entries:
        if _prefix_matches(prefix, path):
            return spec
    raise RouteNotFound(path)


def _pick_track(spec: ServiceSpec, rng_draw: float) -> ReleaseTrack:
    total = sum(t.weight for t in spec.tracks)
    threshold = rng_draw * total
    cumulative = 0
    for track in spec.tracks:
        cumulative += track.weight
        if threshold < cumulative:
            return track
    # rng_draw is in [0,1) so this is unreachable for positive totals.
    return spec.tracks[-1]


def resolve_route(table: RoutingTable, path: str, rng_draw: float) -> RouteDecision:
    """Resolve a request path to a concrete target.

    Legacy services always route to their configured legacy endpoint. For
    tracked services the release track is chosen by the cumulative-weight
    interval containing rng_draw, then the endpoint round-robins within the
    track. Paths are not rewritten: backends mount under the same prefix.
    """
    if not path.startswith("/"):
        raise ValueError(f"path must begin with '/', got {path!r}")
    if not 0.0 <= rng_draw < 1.0:
        raise ValueError(f"rng_draw must be in [0,1), got {rng_draw!r}")
    spec = match_service(table, path)
    if spec.legacy_endpoint is not None:
        return RouteDecision(
            service_name=spec.name,
            target=spec.legacy_endpoint,
            is_legacy=True,
            track_label="legacy",
            stripped_path=path,
        )
    track = _pick_track(spec, rng_draw)
    target = next_endpoint(table.track_state(spec.name, track.label))
    return RouteDecision(
        service_name=spec.name,
        target=target,
        is_legacy=False,
        track_label=track.label,
        stripped_path=path,
    )


def next_endpoint(track_state: TrackState) -> str:
    """Cyclic endpoint selection within a track."""
    return track_state.take()
