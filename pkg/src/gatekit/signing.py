"""Origin-proof request signing shared by the frontend and the backend ingress.

The frontend signs every forwarded request with an HMAC over
``method|path|timestamp`` under a secret shared with the backend; the backend
refuses anything that does not carry a fresh, valid signature. This is the
application-layer half of "requests must come through the frontend" (the
other half is the peer-address allowlist).
"""
from __future__ import annotations

import hashlib
import hmac

ORIGIN_TIME_HEADER = "X-Origin-Time"
ORIGIN_SIG_HEADER = "X-Origin-Sig"
AUTH_DN_HEADER = "X-Auth-DN"
AUTH_ROLES_HEADER = "X-Auth-Roles"

MIN_SECRET_LEN = 32


class SecretError(ValueError):
    """Origin secret missing or too short."""


def check_secret(secret: bytes) -> bytes:
    if len(secret) < MIN_SECRET_LEN:
        raise SecretError(f"origin secret must be at least {MIN_SECRET_LEN} bytes, got {len(secret)}")
    return secret


def sign_request(secret: bytes, method: str, path: str, timestamp: int) -> str:
    message = f"{method}|{path}|{timestamp}".encode("utf-8")
    return hmac.new(secret, message, hashlib.sha256).hexdigest()


def verify_signature(
    secret: bytes,
    method: str,
    path: str,
    timestamp_header: str | None,
    signature_header: str | None,
    now: float,
    tolerance_seconds: float = 60.0,
) -> bool:
    """Constant-time signature check plus freshness window.

    Malformed headers are a verification failure, never an exception.
    """
    if not timestamp_header or not signature_header:
        return False
    try:
        timestamp = int(timestamp_header)
    except ValueError:
        return False
    if abs(now - timestamp) > tolerance_seconds:
        return False
    expected = sign_request(secret, method, path, timestamp)
    return hmac.compare_digest(expected, signature_header)
