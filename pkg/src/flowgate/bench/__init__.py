"""Round-trip latency benchmark: echo entities, metrics, local topology."""

from .metrics import (
    DEFAULT_THRESHOLDS,
    MessageClassThreshold,
    MetricsReport,
    RttSample,
    ShareEntry,
    compute_metrics,
    emit_report,
)
from .echo import BenchmarkResult, EndpointProfile, PassiveEndpoint, run_benchmark
from .topology import Topology, TopologyConfig, run_topology

__all__ = [
    "BenchmarkResult",
    "DEFAULT_THRESHOLDS",
    "EndpointProfile",
    "MessageClassThreshold",
    "MetricsReport",
    "PassiveEndpoint",
    "RttSample",
    "ShareEntry",
    "Topology",
    "TopologyConfig",
    "compute_metrics",
    "emit_report",
    "run_benchmark",
    "run_topology",
]
