"""Gated modular backbones: a mini residual CNN and a mini ViT.

Each gateable layer exposes a width-D binary gate vector that switches its
modules (conv filters / FFN hidden units) on or off. In the CNN every basic
block gates its first conv; the block-final conv, residual path, stem, and
head stay dense so shapes never conflict. In the transformer every FFN
hidden layer is gated; attention stays dense.

The same block classes serve both the supernet (mid width = full width,
gates supplied at forward time) and extracted static subnets (mid width =
retained count, no gates).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CONV = "conv"
TRANSFORMER = "transformer"

FLOAT_BYTES = 4


class SpecError(ValueError):
    pass


class GateShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SupernetSpec:
    backbone: str = CONV
    image_size: int = 56
    in_channels: int = 1
    num_classes: int = 2
    # conv backbone
    stem_channels: int = 16
    block_channels: tuple[int, ...] = (32, 32, 64, 64)
    # transformer backbone
    patch_size: int = 8
    d_model: int = 64
    d_ff: int = 256
    depth: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.backbone not in (CONV, TRANSFORMER):
            raise SpecError(f"backbone must be '{CONV}' or '{TRANSFORMER}', got {self.backbone!r}")
        for name in ("image_size", "in_channels", "num_classes", "stem_channels",
                     "patch_size", "d_model", "d_ff", "depth", "heads"):
            if getattr(self, name) <= 0:
                raise SpecError(f"{name} must be positive, got {getattr(self, name)}")
        if self.backbone == CONV and not self.block_channels:
            raise SpecError("block_channels must be nonempty")
        if any(c <= 0 for c in self.block_channels):
            raise SpecError(f"block_channels must be positive, got {self.block_channels}")
        if self.backbone == TRANSFORMER:
            if self.image_size % self.patch_size != 0:
                raise SpecError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
            if self.d_model % self.heads != 0:
                raise SpecError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    def gate_layout(self) -> "GateLayout":
        if self.backbone == CONV:
            entries = tuple((f"block{i + 1}", c) for i, c in enumerate(self.block_channels))
        else:
            entries = tuple((f"ffn{i + 1}", self.d_ff) for i in range(self.depth))
        return GateLayout(entries)

    def block_strides(self) -> tuple[int, ...]:
        """Stride 2 wherever the channel width changes, else 1."""
        strides, prev = [], self.stem_channels
        for c in self.block_channels:
            strides.append(2 if c != prev else 1)
            prev = c
        return tuple(strides)

    def to_json(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "SupernetSpec":
        data = dict(data)
        data["block_channels"] = tuple(data["block_channels"])
        return cls(**data)


@dataclass(frozen=True)
class GateLayout:
    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        ids = [lid for lid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise SpecError(f"duplicate gate layer ids: {ids}")
        if any(w <= 0 for _, w in self.entries):
            raise SpecError("gate widths must be positive")

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(lid for lid, _ in self.entries)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w for _, w in self.entries)

    @property
    def layer_count(self) -> int:
        return len(self.entries)

    @property
    def total_modules(self) -> int:
        return sum(self.widths)

    def width_of(self, layer_id: str) -> int:
        for lid, w in self.entries:
            if lid == layer_id:
                return w
        raise KeyError(layer_id)

    def hash(self) -> str:
        text = ",".join(f"{lid}:{w}" for lid, w in self.entries)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_json(self) -> list:
        return [[lid, w] for lid, w in self.entries]

    @classmethod
    def from_json(cls, data: list) -> "GateLayout":
        return cls(tuple((lid, int(w)) for lid, w in data))


class GateConfiguration:
    """Per-layer binary activation vectors matching a GateLayout."""

    def __init__(self, layout: GateLayout, vectors: Mapping[str, np.ndarray]):
        self.layout = layout
        self.vectors: dict[str, np.ndarray] = {}
        if set(vectors) != set(layout.layer_ids):
            raise GateShapeError(f"gate layers {sorted(vectors)} do not match layout {sorted(layout.layer_ids)}")
        for lid, width in layout.entries:
            vec = np.asarray(vectors[lid])
            if vec.shape != (width,):
                raise GateShapeError(f"layer {lid}: expected {width} gate entries, got shape {vec.shape}")
            if not np.isin(vec, (0, 1)).all():
                raise GateShapeError(f"layer {lid}: gate entries must be 0 or 1")
            self.vectors[lid] = vec.astype(np.int8)

    @classmethod
    def all_ones(cls, layout: GateLayout) -> "GateConfiguration":
        return cls(layout, {lid: np.ones(w, dtype=np.int8) for lid, w in layout.entries})

    @classmethod
    def from_flat(cls, layout: GateLayout, flat: np.ndarray) -> "GateConfiguration":
        flat = np.asarray(flat).reshape(-1)
        if flat.shape[0] != layout.total_modules:
            raise GateShapeError(f"expected {layout.total_modules} entries, got {flat.shape[0]}")
        vectors, offset = {}, 0
        for lid, w in layout.entries:
            vectors[lid] = flat[offset : offset + w]
            offset += w
        return cls(layout, vectors)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.vectors[lid] for lid in self.layout.layer_ids])

    def active_counts(self) -> tuple[int, ...]:
        return tuple(int(self.vectors[lid].sum()) for lid in self.layout.layer_ids)

    def activation_ratio(self) -> float:
        return float(self.to_flat().sum()) / self.layout.total_modules

    def active_indices(self, layer_id: str) -> np.ndarray:
        return np.flatnonzero(self.vectors[layer_id])

    def to_tensors(self) -> dict[str, torch.Tensor]:
        return {lid: torch.from_numpy(self.vectors[lid].astype(np.float32)) for lid in self.layout.layer_ids}

    def __eq__(self, other) -> bool:
        if not isinstance(other, GateConfiguration):
            return NotImplemented
        return self.layout == other.layout and all(
            np.array_equal(self.vectors[lid], other.vectors[lid]) for lid in self.layout.layer_ids
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for lid in self.layout.layer_ids:
                bits = "".join(str(int(b)) for b in self.vectors[lid])
                f.write(f"{lid} {bits}\n")

    @classmethod
    def load(cls, path: str | Path, layout: GateLayout | None = None) -> "GateConfiguration":
        entries: list[tuple[str, int]] = []
        vectors: dict[str, np.ndarray] = {}
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                lid, bits = line.split()
                if set(bits) - {"0", "1"}:
                    raise GateShapeError(f"layer {lid}: bitstring must contain only 0/1")
                vectors[lid] = np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")
                entries.append((lid, len(bits)))
        file_layout = GateLayout(tuple(entries))
        if layout is not None and layout != file_layout:
            raise GateShapeError(f"gate file layout {file_layout.entries} does not match expected {layout.entries}")
        return cls(layout or file_layout, vectors)


def _mask_channels(x: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    if gate.dim() == 1:
        return x * gate.view(1, -1, 1, 1)
    return x * gate.view(gate.shape[0], -1, 1, 1)


def _mask_tokens(h: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    if gate.dim() == 1:
        return h * gate.view(1, 1, -1)
    return h * gate.view(gate.shape[0], 1, -1)


class GatedConvUnit(nn.Module):
    """conv -> BN -> ReLU with output channels masked by a gate vector."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x, gate=None):
        out = F.relu(self.bn(self.conv(x)))
        if gate is not None:
            if gate.shape[-1] != self.conv.out_channels:
                raise GateShapeError(f"gate length {gate.shape[-1]} != {self.conv.out_channels} filters")
            out = _mask_channels(out, gate)
        return out


class Downsample(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1, stride, 0, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(self.conv(x))


class BasicBlock(nn.Module):
    """Two-conv residual block; the first conv is the gated one.

    mid is the first conv's output width: the full gate width in the
    supernet, the retained filter count in an extracted subnet.
    """

    def __init__(self, cin: int, mid: int, cout: int, stride: int):
        super().__init__()
        self.unit1 = GatedConvUnit(cin, mid, stride)
        self.conv2 = nn.Conv2d(mid, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = Downsample(cin, cout, stride) if (stride != 1 or cin != cout) else None

    def forward(self, x, gate=None):
        h = self.unit1(x, gate)
        h = self.bn2(self.conv2(h))
        shortcut = self.down(x) if self.down is not None else x
        return F.relu(h + shortcut)


class ConvSupernet(nn.Module):
    def __init__(self, spec: SupernetSpec, mid_widths: Sequence[int] | None = None):
        super().__init__()
        assert spec.backbone == CONV
        self.spec = spec
        self.gate_layout = spec.gate_layout()
        mids = tuple(mid_widths) if mid_widths is not None else spec.block_channels
        if len(mids) != len(spec.block_channels):
            raise SpecError("mid_widths must give one width per block")
        self.stem = GatedConvUnit(spec.in_channels, spec.stem_channels, 1)
        blocks, cin = [], spec.stem_channels
        for cout, mid, stride in zip(spec.block_channels, mids, spec.block_strides()):
            blocks.append(BasicBlock(cin, mid, cout, stride))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(spec.block_channels[-1], spec.num_classes)

    def forward(self, x, gates: Mapping[str, torch.Tensor] | None = None):
        gates = _normalize_gates(gates, self.gate_layout)
        x = self.stem(x)
        for lid, block in zip(self.gate_layout.layer_ids, self.blocks):
            x = block(x, gates.get(lid) if gates is not None else None)
        x = x.mean(dim=(2, 3))
        return self.head(x)


class GatedFFN(nn.Module):
    """Token FFN whose hidden units are masked before the nonlinearity."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.w1 = nn.Linear(d_model, hidden)
        self.w2 = nn.Linear(hidden, d_model)

    def forward(self, x, gate=None):
        h = self.w1(x)
        if gate is not None:
            if gate.shape[-1] != self.w1.out_features:
                raise GateShapeError(f"gate length {gate.shape[-1]} != {self.w1.out_features} hidden units")
            h = _mask_tokens(h, gate)
        return self.w2(F.gelu(h))


class TransformerBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, hidden: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = GatedFFN(d_model, hidden)

    def forward(self, x, gate=None):
        h = self.ln1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn_out
        x = x + self.ffn(self.ln2(x), gate)
        return x


class TransformerSupernet(nn.Module):
    def __init__(self, spec: SupernetSpec, mid_widths: Sequence[int] | None = None):
        super().__init__()
        assert spec.backbone == TRANSFORMER
        self.spec = spec
        self.gate_layout = spec.gate_layout()
        mids = tuple(mid_widths) if mid_widths is not None else (spec.d_ff,) * spec.depth
        if len(mids) != spec.depth:
            raise SpecError("mid_widths must give one width per transformer block")
        self.patch = nn.Conv2d(spec.in_channels, spec.d_model, spec.patch_size, spec.patch_size)
        self.num_tokens = (spec.image_size // spec.patch_size) ** 2
        self.pos = nn.Parameter(torch.zeros(1, self.num_tokens, spec.d_model))
        self.blocks = nn.ModuleList(
            TransformerBlock(spec.d_model, spec.heads, mid) for mid in mids
        )
        self.norm = nn.LayerNorm(spec.d_model)
        self.head = nn.Linear(spec.d_model, spec.num_classes)

    def forward(self, x, gates: Mapping[str, torch.Tensor] | None = None):
        gates = _normalize_gates(gates, self.gate_layout)
        x = self.patch(x).flatten(2).transpose(1, 2) + self.pos
        for lid, block in zip(self.gate_layout.layer_ids, self.blocks):
            x = block(x, gates.get(lid) if gates is not None else None)
        x = self.norm(x).mean(dim=1)
        return self.head(x)


def _normalize_gates(gates, layout: GateLayout):
    if gates is None:
        return None
    if isinstance(gates, GateConfiguration):
        if gates.layout != layout:
            raise GateShapeError("gate configuration layout does not match this supernet")
        return gates.to_tensors()
    missing = set(layout.layer_ids) - set(gates)
    if missing:
        raise GateShapeError(f"missing gate vectors for layers {sorted(missing)}")
    return gates


def build_supernet(spec: SupernetSpec, seed: int) -> nn.Module:
    """Deterministically initialized supernet for a spec."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if spec.backbone == CONV:
            model = ConvSupernet(spec)
        else:
            model = TransformerSupernet(spec)
            nn.init.normal_(model.pos, std=0.02)
    return model


def build_subnet_module(spec: SupernetSpec, mid_widths: Sequence[int]) -> nn.Module:
    """Static subnet skeleton whose gated layers are narrowed to mid_widths."""
    if spec.backbone == CONV:
        return ConvSupernet(spec, mid_widths)
    return TransformerSupernet(spec, mid_widths)


# ---------------------------------------------------------------------------
# Analytic resource accounting. These walks must enumerate exactly the
# tensors (and intermediate features) of the static subnet a gate
# configuration extracts to; tests assert parity with real modules.
# ---------------------------------------------------------------------------

_BN_SUFFIXES = ("weight", "bias", "running_mean", "running_var")


@dataclass(frozen=True)
class ResourceCount:
    parameter_bytes: int
    peak_activation_bytes: int
    multiply_accumulate_count: int


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def subnet_tensor_shapes(spec: SupernetSpec, mids: Sequence[int]) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every serialized tensor of the narrowed subnet."""
    shapes: dict[str, tuple[int, ...]] = {}

    def add_bn(prefix: str, channels: int):
        for suffix in _BN_SUFFIXES:
            shapes[f"{prefix}.{suffix}"] = (channels,)

    if spec.backbone == CONV:
        shapes["stem.conv.weight"] = (spec.stem_channels, spec.in_channels, 3, 3)
        add_bn("stem.bn", spec.stem_channels)
        cin = spec.stem_channels
        for i, (cout, mid, stride) in enumerate(zip(spec.block_channels, mids, spec.block_strides())):
            shapes[f"blocks.{i}.unit1.conv.weight"] = (mid, cin, 3, 3)
            add_bn(f"blocks.{i}.unit1.bn", mid)
            shapes[f"blocks.{i}.conv2.weight"] = (cout, mid, 3, 3)
            add_bn(f"blocks.{i}.bn2", cout)
            if stride != 1 or cin != cout:
                shapes[f"blocks.{i}.down.conv.weight"] = (cout, cin, 1, 1)
                add_bn(f"blocks.{i}.down.bn", cout)
            cin = cout
        shapes["head.weight"] = (spec.num_classes, spec.block_channels[-1])
        shapes["head.bias"] = (spec.num_classes,)
    else:
        tokens = (spec.image_size // spec.patch_size) ** 2
        d = spec.d_model
        shapes["patch.weight"] = (d, spec.in_channels, spec.patch_size, spec.patch_size)
        shapes["patch.bias"] = (d,)
        shapes["pos"] = (1, tokens, d)
        for i, mid in enumerate(mids):
            shapes[f"blocks.{i}.ln1.weight"] = (d,)
            shapes[f"blocks.{i}.ln1.bias"] = (d,)
            shapes[f"blocks.{i}.attn.in_proj_weight"] = (3 * d, d)
            shapes[f"blocks.{i}.attn.in_proj_bias"] = (3 * d,)
            shapes[f"blocks.{i}.attn.out_proj.weight"] = (d, d)
            shapes[f"blocks.{i}.attn.out_proj.bias"] = (d,)
            shapes[f"blocks.{i}.ln2.weight"] = (d,)
            shapes[f"blocks.{i}.ln2.bias"] = (d,)
            shapes[f"blocks.{i}.ffn.w1.weight"] = (mid, d)
            shapes[f"blocks.{i}.ffn.w1.bias"] = (mid,)
            shapes[f"blocks.{i}.ffn.w2.weight"] = (d, mid)
            shapes[f"blocks.{i}.ffn.w2.bias"] = (d,)
        shapes["norm.weight"] = (d,)
        shapes["norm.bias"] = (d,)
        shapes["head.weight"] = (spec.num_classes, d)
        shapes["head.bias"] = (spec.num_classes,)
    return shapes


def _activation_sizes(spec: SupernetSpec, mids: Sequence[int]) -> list[int]:
    """Element counts of intermediate features at batch size 1."""
    sizes: list[int] = []
    if spec.backbone == CONV:
        s = spec.image_size
        sizes.append(spec.stem_channels * s * s)
        cin = spec.stem_channels
        for cout, mid, stride in zip(spec.block_channels, mids, spec.block_strides()):
            s = _conv_out_size(s, 3, stride, 1)
            sizes.append(mid * s * s)
            sizes.append(cout * s * s)
            cin = cout
        sizes.append(spec.block_channels[-1])
    else:
        tokens = (spec.image_size // spec.patch_size) ** 2
        sizes.append(tokens * spec.d_model)
        for mid in mids:
            sizes.append(spec.heads * tokens * tokens)
            sizes.append(tokens * mid)
        sizes.append(spec.d_model)
    return sizes


def _macs(spec: SupernetSpec, mids: Sequence[int]) -> int:
    total = 0
    if spec.backbone == CONV:
        s = spec.image_size
        total += 9 * spec.in_channels * spec.stem_channels * s * s
        cin = spec.stem_channels
        for cout, mid, stride in zip(spec.block_channels, mids, spec.block_strides()):
            s_out = _conv_out_size(s, 3, stride, 1)
            total += 9 * cin * mid * s_out * s_out
            total += 9 * mid * cout * s_out * s_out
            if stride != 1 or cin != cout:
                total += cin * cout * s_out * s_out
            cin, s = cout, s_out
        total += spec.block_channels[-1] * spec.num_classes
    else:
        tokens = (spec.image_size // spec.patch_size) ** 2
        d = spec.d_model
        total += spec.patch_size**2 * spec.in_channels * d * tokens
        for mid in mids:
            total += 3 * tokens * d * d  # qkv projections
            total += 2 * tokens * tokens * d  # scores and weighted sum
            total += tokens * d * d  # output projection
            total += 2 * tokens * d * mid  # gated FFN
        total += d * spec.num_classes
    return total


def _resolve_counts(spec: SupernetSpec, gates) -> tuple[int, ...]:
    layout = spec.gate_layout()
    if isinstance(gates, GateConfiguration):
        if gates.layout != layout:
            raise GateShapeError("gate configuration layout does not match the spec")
        return gates.active_counts()
    counts = tuple(int(c) for c in gates)
    if len(counts) != layout.layer_count:
        raise GateShapeError(f"expected {layout.layer_count} per-layer counts, got {len(counts)}")
    for count, width in zip(counts, layout.widths):
        if not 0 <= count <= width:
            raise GateShapeError(f"active count {count} outside [0, {width}]")
    return counts


def count_resources(spec: SupernetSpec, gates) -> ResourceCount:
    """Analytic parameter bytes, peak activation bytes, and MACs for a
    gate configuration (or per-layer active counts)."""
    mids = _resolve_counts(spec, gates)
    shapes = subnet_tensor_shapes(spec, mids)
    param_bytes = FLOAT_BYTES * sum(int(np.prod(shape, dtype=np.int64)) for shape in shapes.values())
    peak = FLOAT_BYTES * max(_activation_sizes(spec, mids))
    return ResourceCount(param_bytes, peak, _macs(spec, mids))
