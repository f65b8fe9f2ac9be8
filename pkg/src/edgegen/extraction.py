"""Exact subnet extraction: drop inactive modules, keep the arithmetic.

An extracted SubnetArtifact is self-contained (architecture descriptor +
parameter blobs + provenance) and its forward pass needs no gate inputs.
For the CNN, inactive filters and their BN channels are removed and the
block's second conv loses the matching input channels; for the
transformer, inactive hidden units drop the matching W1 rows and W2
columns. Extraction refuses configurations with a fully inactive layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import blobio
from .supernet import (
    CONV,
    GateConfiguration,
    SupernetSpec,
    build_subnet_module,
    count_resources,
    subnet_tensor_shapes,
)

ARTIFACT_FORMAT_VERSION = 1
ARCHITECTURE_FILE = "architecture.json"
PARAMS_FILE = "params.bin"
PROVENANCE_FILE = "provenance.json"


class ExtractionError(RuntimeError):
    pass


class ArtifactFormatError(RuntimeError):
    pass


@dataclass
class SubnetArtifact:
    spec: SupernetSpec
    retained: dict[str, np.ndarray]  # gated layer id -> sorted active indices
    tensors: dict[str, np.ndarray]  # float32 blobs, torch state_dict names
    provenance: dict = field(default_factory=dict)
    format_version: int = ARTIFACT_FORMAT_VERSION

    def mid_widths(self) -> tuple[int, ...]:
        return tuple(len(self.retained[lid]) for lid in self.spec.gate_layout().layer_ids)

    def build_module(self) -> nn.Module:
        model = build_subnet_module(self.spec, self.mid_widths())
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.tensors.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        unexpected = [n for n in unexpected]
        missing = [n for n in missing if not n.endswith("num_batches_tracked")]
        if missing or unexpected:
            raise ArtifactFormatError(f"artifact tensors do not match architecture: missing={missing} unexpected={unexpected}")
        model.eval()
        return model

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        descriptor = {
            "format_version": self.format_version,
            "spec": self.spec.to_json(),
            "retained": {lid: [int(i) for i in idx] for lid, idx in self.retained.items()},
        }
        with open(out / ARCHITECTURE_FILE, "w") as f:
            json.dump(descriptor, f, indent=2, sort_keys=True)
        blobio.save_tensors(out / PARAMS_FILE, self.tensors)
        with open(out / PROVENANCE_FILE, "w") as f:
            json.dump(self.provenance, f, indent=2, sort_keys=True)
        return out

    @classmethod
    def load(cls, path: str | Path) -> "SubnetArtifact":
        root = Path(path)
        arch_path = root / ARCHITECTURE_FILE
        if not arch_path.is_file():
            raise ArtifactFormatError(f"not a subnet artifact directory: {root}")
        with open(arch_path) as f:
            descriptor = json.load(f)
        if descriptor.get("format_version") != ARTIFACT_FORMAT_VERSION:
            raise ArtifactFormatError(f"unsupported artifact format version {descriptor.get('format_version')}")
        tensors = blobio.load_tensors(root / PARAMS_FILE)
        with open(root / PROVENANCE_FILE) as f:
            provenance = json.load(f)
        retained = {lid: np.asarray(idx, dtype=np.int64) for lid, idx in descriptor["retained"].items()}
        return cls(
            spec=SupernetSpec.from_json(descriptor["spec"]),
            retained=retained,
            tensors=tensors,
            provenance=provenance,
        )


def _sliced_state(supernet: nn.Module, gates: GateConfiguration) -> dict[str, np.ndarray]:
    spec: SupernetSpec = supernet.spec
    layout = spec.gate_layout()
    state = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in supernet.state_dict().items()
             if not k.endswith("num_batches_tracked")}
    sliced = dict(state)
    for i, lid in enumerate(layout.layer_ids):
        active = gates.active_indices(lid)
        if spec.backbone == CONV:
            prefix = f"blocks.{i}"
            sliced[f"{prefix}.unit1.conv.weight"] = state[f"{prefix}.unit1.conv.weight"][active]
            for suffix in ("weight", "bias", "running_mean", "running_var"):
                sliced[f"{prefix}.unit1.bn.{suffix}"] = state[f"{prefix}.unit1.bn.{suffix}"][active]
            sliced[f"{prefix}.conv2.weight"] = state[f"{prefix}.conv2.weight"][:, active]
        else:
            prefix = f"blocks.{i}.ffn"
            sliced[f"{prefix}.w1.weight"] = state[f"{prefix}.w1.weight"][active]
            sliced[f"{prefix}.w1.bias"] = state[f"{prefix}.w1.bias"][active]
            sliced[f"{prefix}.w2.weight"] = state[f"{prefix}.w2.weight"][:, active]
    return sliced


def extract_subnet(supernet: nn.Module, gates: GateConfiguration, provenance: dict | None = None) -> SubnetArtifact:
    """Prune inactive modules into a standalone static artifact."""
    spec: SupernetSpec = supernet.spec
    layout = spec.gate_layout()
    if gates.layout != layout:
        raise ExtractionError("gate configuration layout does not match the supernet")
    dead = [lid for lid in layout.layer_ids if gates.active_indices(lid).size == 0]
    if dead:
        raise ExtractionError(f"cannot extract a subnet with fully inactive layers: {dead}")
    tensors = _sliced_state(supernet, gates)
    expected = subnet_tensor_shapes(spec, [gates.active_indices(lid).size for lid in layout.layer_ids])
    actual = {name: tuple(arr.shape) for name, arr in tensors.items()}
    if actual != expected:
        raise ExtractionError(f"sliced tensors disagree with the analytic walk: {_shape_diff(actual, expected)}")
    retained = {lid: gates.active_indices(lid) for lid in layout.layer_ids}
    prov = dict(provenance or {})
    prov.setdefault("gates", {lid: "".join(str(int(b)) for b in gates.vectors[lid]) for lid in layout.layer_ids})
    resources = count_resources(spec, gates)
    prov.setdefault("parameter_bytes", resources.parameter_bytes)
    prov.setdefault("peak_activation_bytes", resources.peak_activation_bytes)
    prov.setdefault("multiply_accumulate_count", resources.multiply_accumulate_count)
    return SubnetArtifact(spec=spec, retained=retained, tensors=tensors, provenance=prov)


def _shape_diff(actual: dict, expected: dict) -> str:
    lines = []
    for name in sorted(set(actual) | set(expected)):
        if actual.get(name) != expected.get(name):
            lines.append(f"{name}: got {actual.get(name)}, want {expected.get(name)}")
    return "; ".join(lines)
