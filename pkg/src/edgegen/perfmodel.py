"""Device profiling and the layer-wise linear performance predictor.

Latency is modeled as a linear function of per-layer active module counts
plus a static bias; memory as a linear function of analytic parameter
bytes and peak activation bytes. Both are fitted with ordinary least
squares on profiles of randomly sampled subnets measured at batch size 1.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .extraction import ExtractionError, extract_subnet
from .supernet import GateConfiguration, GateLayout, GateShapeError, SupernetSpec, count_resources

PROFILE_FORMAT_VERSION = 1
PREDICTOR_FORMAT_VERSION = 1


class ProfileFormatError(RuntimeError):
    pass


class FitError(RuntimeError):
    pass


def sample_random_gates(
    layout: GateLayout,
    count: int,
    ratio_range: tuple[float, float] = (0.05, 1.0),
    seed: int = 0,
) -> list[GateConfiguration]:
    """Random binary configurations with uniformly drawn target ratios.

    Every configuration keeps at least one active module per layer.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = ratio_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"ratio_range must satisfy 0 < lo <= hi <= 1, got {ratio_range}")
    rng = np.random.default_rng(seed)
    total = layout.total_modules
    offsets = np.cumsum([0] + list(layout.widths))
    configs = []
    for _ in range(count):
        ratio = rng.uniform(lo, hi)
        k = max(layout.layer_count, int(round(ratio * total)))
        k = min(k, total)
        # one guaranteed pick per layer, remainder uniform over the rest
        guaranteed = np.array(
            [offsets[i] + rng.integers(w) for i, w in enumerate(layout.widths)], dtype=np.int64
        )
        remaining = np.setdiff1d(np.arange(total), guaranteed, assume_unique=False)
        extra = rng.choice(remaining, size=k - layout.layer_count, replace=False)
        flat = np.zeros(total, dtype=np.int8)
        flat[guaranteed] = 1
        flat[extra] = 1
        configs.append(GateConfiguration.from_flat(layout, flat))
    return configs


@dataclass
class ProfilingSample:
    config_id: str
    active_counts: tuple[int, ...]
    latency_ms: float
    memory_bytes: int


@dataclass
class DeviceProfile:
    device_label: str
    layout_hash: str
    checkpoint_hash: str
    spec: SupernetSpec
    warmup: int
    repeats: int
    samples: list[ProfilingSample] = field(default_factory=list)
    skipped: int = 0
    notes: str = "batch_size=1"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        header = {
            "format_version": PROFILE_FORMAT_VERSION,
            "device_label": self.device_label,
            "layout_hash": self.layout_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "spec": self.spec.to_json(),
            "warmup": self.warmup,
            "repeats": self.repeats,
            "skipped": self.skipped,
            "notes": self.notes,
        }
        with open(path, "w") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for s in self.samples:
                record = {
                    "config_id": s.config_id,
                    "active_counts": list(s.active_counts),
                    "latency_ms": s.latency_ms,
                    "memory_bytes": s.memory_bytes,
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DeviceProfile":
        with open(path) as f:
            lines = [line for line in f if line.strip()]
        if not lines:
            raise ProfileFormatError(f"empty profile file: {path}")
        header = json.loads(lines[0])
        if header.get("format_version") != PROFILE_FORMAT_VERSION:
            raise ProfileFormatError(f"unsupported profile format version {header.get('format_version')}")
        samples = []
        for line in lines[1:]:
            record = json.loads(line)
            samples.append(
                ProfilingSample(
                    config_id=record["config_id"],
                    active_counts=tuple(record["active_counts"]),
                    latency_ms=float(record["latency_ms"]),
                    memory_bytes=int(record["memory_bytes"]),
                )
            )
        return cls(
            device_label=header["device_label"],
            layout_hash=header["layout_hash"],
            checkpoint_hash=header["checkpoint_hash"],
            spec=SupernetSpec.from_json(header["spec"]),
            warmup=int(header["warmup"]),
            repeats=int(header["repeats"]),
            samples=samples,
            skipped=int(header.get("skipped", 0)),
            notes=header.get("notes", ""),
        )


def profile_subnets(
    supernet,
    gates_list: list[GateConfiguration],
    warmup: int = 10,
    repeats: int = 50,
    device_label: str = "host",
    checkpoint_hash: str = "",
    progress=None,
) -> DeviceProfile:
    """Extract each configuration and measure its median forward latency.

    Measurements run single-threaded at batch size 1; memory is the
    analytic parameter bytes plus peak activation bytes.
    """
    spec: SupernetSpec = supernet.spec
    layout = spec.gate_layout()
    profile = DeviceProfile(
        device_label=device_label,
        layout_hash=layout.hash(),
        checkpoint_hash=checkpoint_hash,
        spec=spec,
        warmup=warmup,
        repeats=repeats,
        notes="batch_size=1 threads=1 metric=median",
    )
    x = torch.from_numpy(np.random.default_rng(0).standard_normal((1, spec.in_channels, spec.image_size, spec.image_size)).astype(np.float32))
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for i, gates in enumerate(gates_list):
            try:
                artifact = extract_subnet(supernet, gates)
            except ExtractionError:
                profile.skipped += 1
                continue
            model = artifact.build_module()
            with torch.no_grad():
                for _ in range(warmup):
                    model(x)
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    model(x)
                    times.append((time.perf_counter_ns() - t0) / 1e6)
            resources = count_resources(spec, gates)
            profile.samples.append(
                ProfilingSample(
                    config_id=f"g{i:05d}",
                    active_counts=gates.active_counts(),
                    latency_ms=statistics.median(times),
                    memory_bytes=resources.parameter_bytes + resources.peak_activation_bytes,
                )
            )
            if progress is not None:
                progress(i + 1, len(gates_list))
    finally:
        torch.set_num_threads(old_threads)
    return profile


@dataclass
class PerformancePredictor:
    spec: SupernetSpec
    layout_hash: str
    checkpoint_hash: str
    latency_coef: np.ndarray  # one coefficient per gated layer
    latency_bias: float
    memory_coef: np.ndarray  # coefficients over (param bytes, peak activation bytes)
    memory_bias: float
    latency_holdout_accuracy: float  # 1 - MAPE
    memory_holdout_accuracy: float

    def predict(self, gates) -> tuple[float, float]:
        """(latency_ms, memory_bytes) for a gate configuration or counts."""
        if isinstance(gates, GateConfiguration):
            if gates.layout.hash() != self.layout_hash:
                raise GateShapeError("gate configuration layout does not match the predictor")
            counts = np.asarray(gates.active_counts(), dtype=np.float64)
        else:
            counts = np.asarray(gates, dtype=np.float64)
            if counts.shape != self.latency_coef.shape:
                raise GateShapeError(
                    f"expected {self.latency_coef.shape[0]} per-layer counts, got {counts.shape}"
                )
        latency = float(np.dot(self.latency_coef, counts) + self.latency_bias)
        resources = count_resources(self.spec, counts.astype(np.int64))
        features = np.array([resources.parameter_bytes, resources.peak_activation_bytes], dtype=np.float64)
        memory = float(np.dot(self.memory_coef, features) + self.memory_bias)
        return max(0.0, latency), max(0.0, memory)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "format_version": PREDICTOR_FORMAT_VERSION,
            "spec": self.spec.to_json(),
            "layout_hash": self.layout_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "latency_coef": self.latency_coef.tolist(),
            "latency_bias": self.latency_bias,
            "memory_coef": self.memory_coef.tolist(),
            "memory_bias": self.memory_bias,
            "latency_holdout_accuracy": self.latency_holdout_accuracy,
            "memory_holdout_accuracy": self.memory_holdout_accuracy,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PerformancePredictor":
        with open(path) as f:
            payload = json.load(f)
        if payload.get("format_version") != PREDICTOR_FORMAT_VERSION:
            raise ProfileFormatError(f"unsupported predictor format version {payload.get('format_version')}")
        return cls(
            spec=SupernetSpec.from_json(payload["spec"]),
            layout_hash=payload["layout_hash"],
            checkpoint_hash=payload["checkpoint_hash"],
            latency_coef=np.asarray(payload["latency_coef"], dtype=np.float64),
            latency_bias=float(payload["latency_bias"]),
            memory_coef=np.asarray(payload["memory_coef"], dtype=np.float64),
            memory_bias=float(payload["memory_bias"]),
            latency_holdout_accuracy=float(payload["latency_holdout_accuracy"]),
            memory_holdout_accuracy=float(payload["memory_holdout_accuracy"]),
        )


def _mape(true: np.ndarray, pred: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - true) / np.abs(true)))


def fit_predictor(profile: DeviceProfile, holdout_fraction: float = 0.2) -> PerformancePredictor:
    """Ordinary-least-squares fit of the latency and memory models."""
    n = len(profile.samples)
    if n < 50:
        raise FitError(f"need at least 50 profiling samples, got {n}")
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in (0, 1)")
    counts = np.array([s.active_counts for s in profile.samples], dtype=np.float64)
    latency = np.array([s.latency_ms for s in profile.samples], dtype=np.float64)
    memory = np.array([s.memory_bytes for s in profile.samples], dtype=np.float64)

    n_holdout = max(1, int(round(holdout_fraction * n)))
    train_idx = np.arange(n - n_holdout)
    test_idx = np.arange(n - n_holdout, n)

    lat_design = np.hstack([counts, np.ones((n, 1))])
    if np.linalg.matrix_rank(lat_design[train_idx]) < lat_design.shape[1]:
        raise FitError(
            "latency design matrix is rank deficient; profile more subnets with varied activation ratios"
        )
    lat_sol, *_ = np.linalg.lstsq(lat_design[train_idx], latency[train_idx], rcond=None)

    mem_features = []
    for s in profile.samples:
        r = count_resources(profile.spec, np.asarray(s.active_counts, dtype=np.int64))
        mem_features.append((r.parameter_bytes, r.peak_activation_bytes))
    mem_features = np.array(mem_features, dtype=np.float64)
    mem_design = np.hstack([mem_features, np.ones((n, 1))])
    mem_sol, *_ = np.linalg.lstsq(mem_design[train_idx], memory[train_idx], rcond=None)

    lat_pred = lat_design[test_idx] @ lat_sol
    mem_pred = mem_design[test_idx] @ mem_sol
    return PerformancePredictor(
        spec=profile.spec,
        layout_hash=profile.layout_hash,
        checkpoint_hash=profile.checkpoint_hash,
        latency_coef=lat_sol[:-1],
        latency_bias=float(lat_sol[-1]),
        memory_coef=mem_sol[:-1],
        memory_bias=float(mem_sol[-1]),
        latency_holdout_accuracy=1.0 - _mape(latency[test_idx], lat_pred),
        memory_holdout_accuracy=1.0 - _mape(memory[test_idx], mem_pred),
    )
