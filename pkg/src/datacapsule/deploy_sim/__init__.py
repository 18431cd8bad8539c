"""Deployment simulator: base, TTP and co-located capsule hosting."""

from .events import EventLoop
from .metrics import COMPONENTS, CSV_HEADER, Metrics
from .net import HEADER_BYTES, INITCWND, MSS, LinkModel, TcpConnection, Traffic, exchange_us
from .scenarios import (
    DEFAULT_SIZES,
    MODES,
    RPC_HEADER_BYTES,
    AggregationResult,
    CostModel,
    ScenarioConfig,
    balanced,
    chain,
    hub_and_spoke,
    run_aggregation_bench,
    run_invocation_bench,
    run_payload_sweep,
    run_stock_burst,
)

__all__ = [
    "COMPONENTS",
    "CSV_HEADER",
    "DEFAULT_SIZES",
    "HEADER_BYTES",
    "INITCWND",
    "MODES",
    "MSS",
    "RPC_HEADER_BYTES",
    "AggregationResult",
    "CostModel",
    "EventLoop",
    "LinkModel",
    "Metrics",
    "ScenarioConfig",
    "TcpConnection",
    "Traffic",
    "balanced",
    "chain",
    "exchange_us",
    "hub_and_spoke",
    "run_aggregation_bench",
    "run_invocation_bench",
    "run_payload_sweep",
    "run_stock_burst",
]
