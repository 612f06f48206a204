"""Metric-driven replica autoscaling.

The decision function is pure and deliberately tiny: proportional scaling
with a ceiling, a dead-band around the target so constant load never
oscillates, and clamping to the service's replica bounds. Everything else
(scraping, cooldown bookkeeping, actuation) wraps that one function.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

from .metrics import MetricSample

log = logging.getLogger("gatekit.autoscaler")

__all__ = [
    "ScalePolicy",
    "ScaleDecision",
    "AutoscalerState",
    "PolicyFileError",
    "desired_replicas",
    "control_step",
    "load_policies",
    "observed_total",
]

REASON_HOLD_BAND = "within tolerance band"
REASON_HOLD_COOLDOWN = "cooling down"
REASON_METRIC_UNAVAILABLE = "metric_unavailable"


class PolicyFileError(ValueError):
    pass


@dataclass(frozen=True)
class ScalePolicy:
    service_name: str
    metric_name: str
    target_per_replica: float
    min_replicas: int
    max_replicas: int
    tolerance: float = 0.1
    cooldown_seconds: float = 30.0
    evaluation_interval_seconds: float = 10.0

    def __post_init__(self):
        if self.target_per_replica <= 0:
            raise PolicyFileError(f"{self.service_name}: target_per_replica must be positive")
        if not 1 <= self.min_replicas <= self.max_replicas:
            raise PolicyFileError(f"{self.service_name}: bad replica bounds")
        if not 0 < self.tolerance < 1:
            raise PolicyFileError(f"{self.service_name}: tolerance must be in (0,1)")
        if self.cooldown_seconds < self.evaluation_interval_seconds:
            raise PolicyFileError(f"{self.service_name}: cooldown must cover the evaluation interval")


@dataclass(frozen=True)
class ScaleDecision:
    service_name: str
    current: int
    desired: int
    reason: str
    effective_at: float


def desired_replicas(current: int, observed: float, policy: ScalePolicy) -> int:
    """Proportional desired-count: hold inside the tolerance band, otherwise
    ceil(current * observed/(current*target)) clamped to [min, max]."""
    if current < 1:
        raise ValueError("current must be >= 1")
    if observed < 0:
        raise ValueError("observed must be >= 0")
    ratio = observed / (current * policy.target_per_replica)
    if abs(ratio - 1.0) <= policy.tolerance:
        return current
    raw = math.ceil(current * ratio)
    return max(policy.min_replicas, min(policy.max_replicas, raw))


def observed_total(samples: list[MetricSample], policy: ScalePolicy) -> float | None:
    """Sum the policy's metric over scraped samples; None when absent.

    Samples labelled with a service keep only the policy's service; unlabelled
    samples of the right name count as-is.
    """
    matched = [
        s for s in samples
        if s.name == policy.metric_name
        and dict(s.labels).get("service", policy.service_name) == policy.service_name
    ]
    if not matched:
        return None
    return sum(s.value for s in matched)


@dataclass
class AutoscalerState:
    last_change: dict[str, float] = field(default_factory=dict)


def control_step(
    state: AutoscalerState,
    samples: list[MetricSample],
    policies: list[ScalePolicy],
    current_counts: dict[str, int],
    now: float | None = None,
) -> list[ScaleDecision]:
    """One evaluation pass: a decision per policy, never scaling on absent
    metrics and suppressing changes inside the cooldown window."""
    now = time.time() if now is None else now
    decisions: list[ScaleDecision] = []
    for policy in policies:
        current = current_counts.get(policy.service_name, policy.min_replicas)
        observed = observed_total(samples, policy)
        if observed is None:
            decisions.append(ScaleDecision(
                policy.service_name, current, current, REASON_METRIC_UNAVAILABLE, now))
            continue
        desired = desired_replicas(current, observed, policy)
        if desired == current:
            decisions.append(ScaleDecision(
                policy.service_name, current, current, REASON_HOLD_BAND, now))
            continue
        last = state.last_change.get(policy.service_name)
        if last is not None and now < last + policy.cooldown_seconds:
            decisions.append(ScaleDecision(
                policy.service_name, current, current, REASON_HOLD_COOLDOWN, now))
            continue
        state.last_change[policy.service_name] = now
        decisions.append(ScaleDecision(
            policy.service_name, current, desired,
            f"observed={observed:g} target={policy.target_per_replica:g}/replica", now))
    return decisions


_POLICY_KEYS = {
    "service_name", "metric_name", "target_per_replica", "min_replicas",
    "max_replicas", "tolerance", "cooldown_seconds", "evaluation_interval_seconds",
}


def load_policies(text: str) -> list[ScalePolicy]:
    """Policy file: JSON array of ScalePolicy objects, unknown keys rejected."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyFileError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise PolicyFileError("policy file must be a JSON array")
    policies = []
    for entry in doc:
        if not isinstance(entry, dict):
            raise PolicyFileError(f"policy entry must be an object, got {entry!r}")
        unknown = set(entry) - _POLICY_KEYS
        if unknown:
            raise PolicyFileError(f"unknown policy keys {sorted(unknown)}")
        try:
            policies.append(ScalePolicy(**entry))
        except TypeError as exc:
            raise PolicyFileError(str(exc)) from exc
    return policies
