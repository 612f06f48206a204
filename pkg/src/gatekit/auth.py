"""Client-certificate verification and per-service authorization.

The frontend is the single place identities are established: a presented
chain must verify up to a configured trust root, sit inside its validity
window, and not be revoked. Roles come only from the DN pattern rules in
the policy ("*" glob on the RFC 4514 subject string; regex is deliberately
not supported so policies stay auditable).
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa

from .signing import check_secret

__all__ = [
    "Identity",
    "AuthPolicy",
    "AuthDecision",
    "CertificateRejected",
    "PolicyError",
    "verify_client_certificate",
    "authorize",
    "load_auth_policy",
    "dn_pattern_matches",
]

REASON_OK = "ok"
REASON_NO_CERT = "no_cert"
REASON_UNTRUSTED = "untrusted_issuer"
REASON_EXPIRED = "expired"
REASON_REVOKED = "revoked"
REASON_NO_ROLE = "no_role"

_MAX_CHAIN_DEPTH = 4


class PolicyError(ValueError):
    """Auth policy file invalid."""


class CertificateRejected(Exception):
    """Client certificate failed verification; reason maps to a 401."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class Identity:
    subject_dn: str
    common_name: str
    issuer_dn: str
    roles: tuple[str, ...]
    not_after: float  # unix seconds


@dataclass
class AuthPolicy:
    trusted_roots: list[x509.Certificate]
    dn_role_rules: list[tuple[str, str]]
    revoked_dns: set[str] = field(default_factory=set)
    origin_secret: bytes = b""

    def __post_init__(self):
        if not self.trusted_roots:
            raise PolicyError("auth policy needs at least one trusted root")
        if self.origin_secret:
            check_secret(self.origin_secret)


@dataclass(frozen=True)
class AuthDecision:
    allowed: bool
    reason: str

    def __post_init__(self):
        assert self.allowed == (self.reason == REASON_OK)


def dn_pattern_matches(pattern: str, dn: str) -> bool:
    """Glob match with '*' as the only wildcard, anchored at both ends."""
    parts = pattern.split("*")
    regex = ".*".join(re.escape(p) for p in parts)
    # DOTALL so the wildcard also spans newlines, which RFC 4514 strings
    # may legally contain inside attribute values.
    return re.fullmatch(regex, dn, re.DOTALL) is not None


def _verify_signed_by(cert: x509.Certificate, issuer: x509.Certificate) -> bool:
    if cert.issuer != issuer.subject:
        return False
    public_key = issuer.public_key()
    try:
        if isinstance(public_key, rsa.RSAPublicKey):
            public_key.verify(
                cert.signature,
                cert.tbs_certificate_bytes,
                padding.PKCS1v15(),
                cert.signature_hash_algorithm,
            )
        elif isinstance(public_key, ec.EllipticCurvePublicKey):
            public_key.verify(
                cert.signature,
                cert.tbs_certificate_bytes,
                ec.ECDSA(cert.signature_hash_algorithm),
            )
        else:
            return False
    except InvalidSignature:
        return False
    return True


def _chain_to_root(leaf: x509.Certificate, intermediates: list[x509.Certificate],
                   roots: list[x509.Certificate]) -> bool:
    current = leaf
    for _ in range(_MAX_CHAIN_DEPTH):
        if any(_verify_signed_by(current, root) for root in roots):
            return True
        parent = next((c for c in intermediates if _verify_signed_by(current, c)), None)
        if parent is None:
            return False
        current = parent
    return False


def _common_name(name: x509.Name) -> str:
    attrs = name.get_attributes_for_oid(x509.NameOID.COMMON_NAME)
    return attrs[0].value if attrs else ""


def verify_client_certificate(
    chain: list[x509.Certificate],
    policy: AuthPolicy,
    now: float,
) -> Identity:
    """Verify a presented chain and derive the caller's identity.

    chain[0] is the leaf; any further entries are untrusted intermediates.
    Raises CertificateRejected with one of the enumerated reasons.
    """
    if not chain:
        raise CertificateRejected(REASON_NO_CERT, "no client certificate presented")
    leaf = chain[0]
    subject_dn = leaf.subject.rfc4514_string()
    if not _chain_to_root(leaf, list(chain[1:]), policy.trusted_roots):
        raise CertificateRejected(REASON_UNTRUSTED, subject_dn)
    not_before = leaf.not_valid_before_utc.timestamp() if hasattr(leaf, "not_valid_before_utc") \
        else leaf.not_valid_before.timestamp()
    not_after = leaf.not_valid_after_utc.timestamp() if hasattr(leaf, "not_valid_after_utc") \
        else leaf.not_valid_after.timestamp()
    if now < not_before or now > not_after:
        raise CertificateRejected(REASON_EXPIRED, subject_dn)
    if subject_dn in policy.revoked_dns:
        raise CertificateRejected(REASON_REVOKED, subject_dn)
    roles = tuple(
        role for pattern, role in policy.dn_role_rules if dn_pattern_matches(pattern, subject_dn)
    )
    return Identity(
        subject_dn=subject_dn,
        common_name=_common_name(leaf.subject),
        issuer_dn=leaf.issuer.rfc4514_string(),
        roles=roles,
        not_after=not_after,
    )


def authorize(identity: Identity, required_roles: frozenset[str] | set[str]) -> AuthDecision:
    """Allowed iff the identity holds one of the required roles; an empty
    requirement admits every authenticated caller."""
    if not required_roles or set(identity.roles) & set(required_roles):
        return AuthDecision(True, REASON_OK)
    return AuthDecision(False, REASON_NO_ROLE)


def load_auth_policy(path: str, origin_secret: bytes = b"") -> AuthPolicy:
    """Load a policy JSON file.

    Schema: {"trusted_roots": [pem paths, relative to the policy file],
             "dn_role_rules": [{"dn_pattern": ..., "role": ...}, ...],
             "revoked_dns": [...]}
    """
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise PolicyError(f"cannot load auth policy {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise PolicyError("policy top level must be an object")
    unknown = set(doc) - {"trusted_roots", "dn_role_rules", "revoked_dns"}
    if unknown:
        raise PolicyError(f"unknown policy keys {sorted(unknown)}")
    roots: list[x509.Certificate] = []
    for entry in doc.get("trusted_roots", []):
        pem_path = entry if os.path.isabs(entry) else os.path.join(base, entry)
        try:
            with open(pem_path, "rb") as fh:
                roots.extend(x509.load_pem_x509_certificates(fh.read()))
        except (OSError, ValueError) as exc:
            raise PolicyError(f"cannot load trusted root {entry}: {exc}") from exc
    rules: list[tuple[str, str]] = []
    for rule in doc.get("dn_role_rules", []):
        if not isinstance(rule, dict) or set(rule) != {"dn_pattern", "role"}:
            raise PolicyError(f"bad dn_role_rule {rule!r}")
        rules.append((rule["dn_pattern"], rule["role"]))
    revoked = doc.get("revoked_dns", [])
    if not all(isinstance(dn, str) for dn in revoked):
        raise PolicyError("revoked_dns must be strings")
    return AuthPolicy(
        trusted_roots=roots,
        dn_role_rules=rules,
        revoked_dns=set(revoked),
        origin_secret=origin_secret,
    )
