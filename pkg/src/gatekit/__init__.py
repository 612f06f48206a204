"""gatekit: a desk-scale two-tier authenticated web gateway with a
supervised replica pool, metric-driven autoscaling, and a load-bench
harness."""

__version__ = "0.1.0"
