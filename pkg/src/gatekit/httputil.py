"""Small HTTP plumbing shared by the frontend, the ingress, and the bench."""
from __future__ import annotations

import http.client
import socket
import threading
from dataclasses import dataclass, field

HOP_BY_HOP = {
    "connection", "keep-alive", "proxy-authenticate", "proxy-authorization",
    "te", "trailers", "transfer-encoding", "upgrade",
}


class UpstreamUnreachable(Exception):
    pass


class UpstreamTimeout(Exception):
    pass


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind((host, 0))
        return sock.getsockname()[1]


def split_hostport(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host, int(port)


@dataclass
class ProxyResponse:
    status: int
    headers: list[tuple[str, str]]
    body: bytes


@dataclass
class _ConnCache:
    """Per-thread keep-alive connections keyed by target address."""
    local: threading.local = field(default_factory=threading.local)

    def get(self, target: str, timeout: float) -> http.client.HTTPConnection:
        pool = getattr(self.local, "pool", None)
        if pool is None:
            pool = self.local.pool = {}
        conn = pool.get(target)
        if conn is None:
            host, port = split_hostport(target)
            conn = http.client.HTTPConnection(host, port, timeout=timeout)
            pool[target] = conn
        conn.timeout = timeout
        return conn

    def drop(self, target: str):
        pool = getattr(self.local, "pool", None)
        if pool and target in pool:
            try:
                pool.pop(target).close()
            except OSError:
                pass


def proxy_request(
    cache: _ConnCache,
    target: str,
    method: str,
    path: str,
    headers: dict[str, str],
    body: bytes,
    timeout: float,
) -> ProxyResponse:
    """Forward one request over a cached keep-alive connection.

    Retries once on a stale connection; raises UpstreamUnreachable or
    UpstreamTimeout for the caller to map to 502/504.
    """
    out_headers = {k: v for k, v in headers.items() if k.lower() not in HOP_BY_HOP}
    out_headers["Content-Length"] = str(len(body))
    for attempt in (0, 1):
        conn = cache.get(target, timeout)
        try:
            conn.request(method, path, body=body, headers=out_headers)
            resp = conn.getresponse()
            payload = resp.read()
            resp_headers = [
                (k, v) for k, v in resp.getheaders() if k.lower() not in HOP_BY_HOP
            ]
            return ProxyResponse(resp.status, resp_headers, payload)
        except socket.timeout as exc:
            cache.drop(target)
            raise UpstreamTimeout(str(exc)) from exc
        except (ConnectionError, http.client.HTTPException, OSError) as exc:
            cache.drop(target)
            if attempt == 1 or isinstance(exc, ConnectionRefusedError):
                raise UpstreamUnreachable(str(exc)) from exc
    raise UpstreamUnreachable(target)


def new_conn_cache() -> _ConnCache:
    return _ConnCache()
