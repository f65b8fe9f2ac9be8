"""Requirement-aware gate generator.

Maps a (task, activation limit) request to per-layer gate logits through a
selection encoder (FC + BN + ReLU) and one gater per gated layer. Each
gater is a softmax-routed mixture of FC + BN experts with per-layer,
per-expert BN; a single-expert mixture reduces to the plain gater. The
gater emits raw logits: activation is decided by weight > 0, equivalently
sigmoid(weight) > 0.5.

Discretization follows Improved SemHash: a hard binary value
g_alpha = 1(weight > 0) paired with a clamped-sigmoid surrogate
g_beta = clamp(1.2 * sigmoid(weight) - 0.1, 0, 1) whose gradient stands in
for the hard value's during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tasks import (
    LIMIT_ENCODING_DIM,
    TASK_ENCODING_DIM,
    TaskDescriptor,
    encode_limit,
    encode_task,
)
from .supernet import GateConfiguration, GateLayout, GateShapeError

HARD = "hard"
SOFT = "soft"
STRAIGHT_THROUGH = "straight_through"

DEFAULT_SELECTION_DIM = 128
DEFAULT_NUM_GATERS = 4


@dataclass(frozen=True)
class GenerationRequest:
    task: TaskDescriptor
    activation_limit: float

    def __post_init__(self):
        if not 0.0 < self.activation_limit <= 1.0:
            raise ValueError(f"activation limit must be in (0, 1], got {self.activation_limit}")


def encode_requirement(request: GenerationRequest, limit_dim: int = LIMIT_ENCODING_DIM) -> np.ndarray:
    """Task one-hot bits followed by the limit positional encoding."""
    return np.concatenate([encode_task(request.task), encode_limit(request.activation_limit, limit_dim)])


class LayerGater(nn.Module):
    """Mixture of FC+BN experts for one layer, combined by a routing network."""

    def __init__(self, d_sel: int, width: int, num_experts: int):
        super().__init__()
        if num_experts < 1:
            raise ValueError("need at least one gater expert")
        self.fcs = nn.ModuleList(nn.Linear(d_sel, width) for _ in range(num_experts))
        self.bns = nn.ModuleList(nn.BatchNorm1d(width) for _ in range(num_experts))
        self.router = nn.Linear(d_sel, num_experts) if num_experts > 1 else None

    def forward(self, enc_sel: torch.Tensor) -> torch.Tensor:
        outputs = torch.stack([bn(fc(enc_sel)) for fc, bn in zip(self.fcs, self.bns)], dim=1)
        if self.router is None:
            return outputs.squeeze(1)
        mix = F.softmax(self.router(enc_sel), dim=-1)
        return (outputs * mix.unsqueeze(-1)).sum(dim=1)


class Assembler(nn.Module):
    def __init__(
        self,
        layout: GateLayout,
        limit_dim: int = LIMIT_ENCODING_DIM,
        d_sel: int = DEFAULT_SELECTION_DIM,
        num_gaters: int = DEFAULT_NUM_GATERS,
    ):
        super().__init__()
        self.layout = layout
        self.limit_dim = limit_dim
        self.d_sel = d_sel
        self.num_gaters = num_gaters
        d_req = TASK_ENCODING_DIM + limit_dim
        self.sel_fc = nn.Linear(d_req, d_sel)
        self.sel_bn = nn.BatchNorm1d(d_sel)
        self.gaters = nn.ModuleDict(
            {lid: LayerGater(d_sel, width, num_gaters) for lid, width in layout.entries}
        )

    def select_encode(self, enc_req: torch.Tensor) -> torch.Tensor:
        return F.relu(self.sel_bn(self.sel_fc(enc_req)))

    def forward(self, enc_req: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-layer gate logits for a batch of requirement encodings."""
        enc_sel = self.select_encode(enc_req)
        return {lid: gater(enc_sel) for lid, gater in self.gaters.items()}


def build_assembler(
    layout: GateLayout,
    limit_dim: int = LIMIT_ENCODING_DIM,
    d_sel: int = DEFAULT_SELECTION_DIM,
    num_gaters: int = DEFAULT_NUM_GATERS,
    seed: int = 0,
) -> Assembler:
    """Deterministically initialized assembler for a gate layout."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Assembler(layout, limit_dim=limit_dim, d_sel=d_sel, num_gaters=num_gaters)


def semhash_discretize(weight: torch.Tensor, mode: str) -> torch.Tensor:
    """Binary (hard), clamped-sigmoid (soft), or straight-through gates."""
    g_alpha = (weight > 0).to(weight.dtype)
    if mode == HARD:
        return g_alpha
    g_beta = torch.clamp(1.2 * torch.sigmoid(weight) - 0.1, 0.0, 1.0)
    if mode == SOFT:
        return g_beta
    if mode == STRAIGHT_THROUGH:
        return g_beta + (g_alpha - g_beta).detach()
    raise ValueError(f"unknown SemHash mode {mode!r}")


def generate_gate_logits(request: GenerationRequest, assembler: Assembler) -> dict[str, np.ndarray]:
    """Deterministic raw logits for one request (running BN statistics)."""
    enc = torch.from_numpy(encode_requirement(request, assembler.limit_dim)).unsqueeze(0)
    was_training = assembler.training
    assembler.eval()
    try:
        with torch.no_grad():
            logits = assembler(enc)
    finally:
        assembler.train(was_training)
    return {lid: weight.squeeze(0).numpy().astype(np.float64) for lid, weight in logits.items()}


def generate_gates(request: GenerationRequest, assembler: Assembler) -> GateConfiguration:
    """Binary gate configuration: active where sigmoid(weight) > 0.5."""
    logits = generate_gate_logits(request, assembler)
    vectors = {lid: (weight > 0).astype(np.int8) for lid, weight in logits.items()}
    return GateConfiguration(assembler.layout, vectors)


def gate_similarity(g1: GateConfiguration, g2: GateConfiguration) -> float:
    """Cosine similarity of the flattened binary gate vectors."""
    if g1.layout != g2.layout:
        raise GateShapeError("gate configurations have different layouts")
    a = g1.to_flat().astype(np.float64)
    b = g2.to_flat().astype(np.float64)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0.0:
        return 0.0
    return float(np.dot(a, b) / norm)
