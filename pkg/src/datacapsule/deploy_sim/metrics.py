"""Latency samples, percentile ranges, bandwidth and per-component breakdown."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COMPONENTS = ("service", "hub", "boundary", "policy", "data_layer", "network")

CSV_HEADER = "metric,scenario,param,median,p50lo,p50hi,p95lo,p95hi"


@dataclass
class Metrics:
    """Latency samples in microseconds; ``breakdown`` holds one array per
    component, aligned with ``samples`` and summing to it."""

    scenario: str
    param: str = ""
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    breakdown: dict[str, np.ndarray] = field(default_factory=dict)
    bytes_per_op: float = 0.0
    ops: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_components(cls, scenario: str, param: str, parts: dict[str, np.ndarray], **kw) -> "Metrics":
        parts = {k: np.asarray(v, dtype=float) for k, v in parts.items()}
        total = sum(parts.values()) if parts else np.zeros(0)
        return cls(scenario, param, np.asarray(total, dtype=float), parts, **kw)

    @property
    def median(self) -> float:
        return float(np.median(self.samples)) if self.samples.size else 0.0

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.samples, q)) if self.samples.size else 0.0

    @property
    def p50_range(self) -> tuple[float, float]:
        return self.percentile(25), self.percentile(75)

    @property
    def p95_range(self) -> tuple[float, float]:
        return self.percentile(2.5), self.percentile(97.5)

    def component_means(self) -> dict[str, float]:
        return {k: float(np.mean(v)) if v.size else 0.0 for k, v in self.breakdown.items()}

    def breakdown_error(self) -> float:
        """Relative gap between the summed components and the total."""
        if not self.samples.size:
            return 0.0
        parts = sum(self.breakdown.values())
        return float(np.max(np.abs(parts - self.samples) / np.maximum(self.samples, 1e-12)))

    def row(self, metric: str) -> str:
        lo50, hi50 = self.p50_range
        lo95, hi95 = self.p95_range
        cells = [metric, self.scenario, self.param, self.median, lo50, hi50, lo95, hi95]
        return ",".join(c if isinstance(c, str) else f"{c:.1f}" for c in cells)

    def bandwidth_row(self) -> str:
        b = self.bytes_per_op
        return ",".join(["bandwidth_bytes", self.scenario, self.param] + [f"{b:.1f}"] * 5)

    def describe(self) -> str:
        lo50, hi50 = self.p50_range
        lo95, hi95 = self.p95_range
        parts = ", ".join(f"{k} {v:.0f}" for k, v in self.component_means().items() if v)
        return (
            f"{self.scenario:<10} {self.param:<14} median {self.median:>12.1f} us"
            f"  50% [{lo50:.1f}, {hi50:.1f}]  95% [{lo95:.1f}, {hi95:.1f}]"
            f"  bytes/op {self.bytes_per_op:.0f}  ({parts})"
        )
