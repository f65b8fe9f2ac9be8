"""Budgeted limit sweep over assembler-generated gate configurations.

The search raises the activation limit in fixed steps, generates gates for
(task, limit) each round, enforces the limit by importance when the raw
configuration overshoots, predicts latency/memory, and stops at the first
round that violates a budget, returning the last passing configuration.
Importance is the gate logit value; enforcement keeps the global top-k
logits and re-activates each dead layer's best module.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .assembler import Assembler, GenerationRequest, generate_gate_logits
from .extraction import SubnetArtifact, extract_subnet
from .perfmodel import PerformancePredictor
from .supernet import GateConfiguration, GateLayout
from .tasks import EdgeScenario
from .training import JointCheckpoint


class BudgetInfeasibleError(RuntimeError):
    def __init__(self, message: str, latency_ms: float, memory_bytes: float):
        super().__init__(message)
        self.latency_ms = latency_ms
        self.memory_bytes = memory_bytes


@dataclass(frozen=True)
class SearchConfig:
    start_limit: float = 0.01
    step: float = 0.01
    max_limit: float = 1.0
    enforce_limit: bool = True

    def __post_init__(self):
        if not 0.0 < self.start_limit <= self.max_limit <= 1.0:
            raise ValueError("limits must satisfy 0 < start <= max <= 1")
        if self.step <= 0:
            raise ValueError("step must be positive")

    def sweep(self) -> list[float]:
        limits = []
        i = 0
        while True:
            limit = round(self.start_limit + i * self.step, 10)
            if limit > self.max_limit + 1e-12:
                break
            limits.append(min(limit, 1.0))
            i += 1
        return limits


@dataclass
class RoundTrace:
    round: int
    limit: float
    ratio: float
    latency_ms: float
    memory_bytes: float
    verdict: str  # "pass" | "fail"

    def format_line(self) -> str:
        return (
            f"round={self.round} limit={self.limit:.4f} ratio={self.ratio:.4f} "
            f"lat_ms={self.latency_ms:.4f} mem_bytes={self.memory_bytes:.0f} verdict={self.verdict}"
        )


@dataclass
class SearchResult:
    gates: GateConfiguration
    limit: float
    predicted_latency_ms: float
    predicted_memory_bytes: float
    rounds: int
    trace: list[RoundTrace] = field(default_factory=list)


def enforce_limit(logits: dict[str, np.ndarray], layout: GateLayout, limit: float) -> GateConfiguration:
    """Cap the thresholded configuration at the limit by logit importance.

    Entries are ranked by logit value with ties broken by (layer index,
    module index); each dead layer gets its best module re-activated, which
    may exceed the cap by one entry per such layer. Limits below
    layer_count/total_modules therefore still yield a valid configuration:
    the forced one-module-per-layer minimum.
    """
    if not 0.0 < limit <= 1.0:
        raise ValueError(f"limit must be in (0, 1], got {limit}")
    total = layout.total_modules
    cap = int(limit * total)
    flat_logits = np.concatenate([np.asarray(logits[lid], dtype=np.float64) for lid in layout.layer_ids])
    keep = flat_logits > 0
    if keep.sum() > cap:
        order = sorted(range(total), key=lambda i: (-flat_logits[i], i))
        keep = np.zeros(total, dtype=bool)
        keep[order[:cap]] = True
    # re-activate the best module of any fully inactive layer
    offsets = np.cumsum([0] + list(layout.widths))
    for i in range(layout.layer_count):
        lo, hi = offsets[i], offsets[i + 1]
        if not keep[lo:hi].any():
            keep[lo + int(np.argmax(flat_logits[lo:hi]))] = True
    return GateConfiguration.from_flat(layout, keep.astype(np.int8))


def search(
    scenario: EdgeScenario,
    checkpoint: JointCheckpoint,
    predictor: PerformancePredictor,
    config: SearchConfig = SearchConfig(),
) -> SearchResult:
    """Return the largest-limit configuration that fits the budgets."""
    if predictor.layout_hash != checkpoint.layout.hash():
        raise ValueError("predictor was fitted for a different gate layout")
    assembler: Assembler = checkpoint.assembler
    layout = checkpoint.layout
    trace: list[RoundTrace] = []
    best: tuple[GateConfiguration, float, float, float] | None = None
    for round_no, limit in enumerate(config.sweep(), start=1):
        logits = generate_gate_logits(GenerationRequest(scenario.task, limit), assembler)
        if config.enforce_limit:
            gates = enforce_limit(logits, layout, limit)
        else:
            gates = GateConfiguration(
                layout, {lid: (w > 0).astype(np.int8) for lid, w in logits.items()}
            )
        latency, memory = predictor.predict(gates)
        ok = True
        if scenario.latency_budget_ms is not None and latency > scenario.latency_budget_ms:
            ok = False
        if scenario.memory_budget_bytes is not None and memory > scenario.memory_budget_bytes:
            ok = False
        trace.append(
            RoundTrace(
                round=round_no,
                limit=limit,
                ratio=gates.activation_ratio(),
                latency_ms=latency,
                memory_bytes=memory,
                verdict="pass" if ok else "fail",
            )
        )
        if not ok:
            if best is None:
                raise BudgetInfeasibleError(
                    f"budgets infeasible: the smallest candidate (limit {limit:g}) predicts "
                    f"latency {latency:.3f} ms and memory {memory:.0f} bytes",
                    latency,
                    memory,
                )
            break
        best = (gates, limit, latency, memory)
    assert best is not None
    gates, limit, latency, memory = best
    return SearchResult(
        gates=gates,
        limit=limit,
        predicted_latency_ms=latency,
        predicted_memory_bytes=memory,
        rounds=len(trace),
        trace=trace,
    )


def generate_model(
    scenario: EdgeScenario,
    checkpoint: JointCheckpoint,
    predictor: PerformancePredictor,
    config: SearchConfig = SearchConfig(),
    checkpoint_id: str = "",
) -> tuple[SubnetArtifact, SearchResult]:
    """Search, then extract the chosen subnet with full provenance."""
    t0 = time.perf_counter()
    result = search(scenario, checkpoint, predictor, config)
    provenance = {
        "checkpoint_hash": checkpoint_id,
        "task": scenario.task.canonical(),
        "latency_budget_ms": scenario.latency_budget_ms,
        "memory_budget_bytes": scenario.memory_budget_bytes,
        "limit": result.limit,
        "predicted_latency_ms": result.predicted_latency_ms,
        "predicted_memory_bytes": result.predicted_memory_bytes,
        "search_rounds": result.rounds,
        "search_trace": [t.format_line() for t in result.trace],
    }
    artifact = extract_subnet(checkpoint.supernet, result.gates, provenance)
    artifact.provenance["generation_seconds"] = time.perf_counter() - t0
    return artifact, result
