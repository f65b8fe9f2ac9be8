"""Joint supernet-assembler training and checkpointing.

Every batch is homogeneous in (task, limit) so one gate configuration
gates the whole batch. Batches are consumed in small groups per optimizer
step: the group gives the assembler's BatchNorm a real batch dimension and
amortizes one step over several tasks. Per batch, a fair coin picks the
SemHash mode: hard gates with straight-through gradients, or the soft
surrogate.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import blobio
from .assembler import (
    SOFT,
    STRAIGHT_THROUGH,
    Assembler,
    GenerationRequest,
    encode_requirement,
    generate_gates,
    semhash_discretize,
)
from .dataset import LabeledSample
from .supernet import GateLayout, SupernetSpec, build_supernet
from .tasks import TaskDescriptor

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.bin"
METRICS_FILE = "metrics.jsonl"

DEFAULT_LIMIT_POOL = (0.01, 0.03, 0.05, 0.10, 0.20, 0.50)


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 40
    batch_size: int = 32
    optimizer: str = "adam0"  # momentum-free adaptive method
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"
    gate_loss_weight: float = 100.0
    limit_pool: tuple[float, ...] = DEFAULT_LIMIT_POOL
    seed: int = 0
    hold_out: float = 0.0
    tasks_per_step: int = 8  # homogeneous batches folded into one optimizer step
    val_fraction: float = 0.1
    val_limit: float = 0.10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.tasks_per_step < 1:
            raise ValueError("epochs, batch_size, and tasks_per_step must be >= 1")
        if self.gate_loss_weight <= 0:
            raise ValueError("gate_loss_weight must be positive")
        if not self.limit_pool or any(not 0.0 < l <= 1.0 for l in self.limit_pool):
            raise ValueError("limit_pool entries must lie in (0, 1]")
        if not 0.0 <= self.hold_out < 1.0:
            raise ValueError("hold_out must be in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.optimizer not in ("adam0", "adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def gate_loss(gate_values, limit: float):
    """Zero while the ratio of ones stays within the limit, squared excess above it."""
    if isinstance(gate_values, torch.Tensor):
        ratio = gate_values.mean()
        return torch.clamp(ratio - limit, min=0.0) ** 2
    ratio = float(np.mean(gate_values))
    return max(0.0, ratio - limit) ** 2


def total_loss(logits, labels, gate_values, limit: float, weight: float):
    """Cross-entropy task loss plus weighted gate-sparsity loss."""
    tl = F.cross_entropy(logits, labels)
    gl = gate_loss(gate_values, limit)
    return tl + weight * gl, tl, gl


@dataclass
class Batch:
    task: TaskDescriptor
    limit: float
    images: np.ndarray  # (B, 1, H, W) float32
    labels: np.ndarray  # (B,) int64


def _stack(samples: list[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])[:, None, :, :].astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


def make_batches(
    dataset: dict[TaskDescriptor, list[LabeledSample]],
    limit_pool,
    batch_size: int,
    seed: int,
) -> list[Batch]:
    """Task-homogeneous batches with a per-batch limit, shuffled across tasks."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    limit_pool = list(limit_pool)
    batches: list[Batch] = []
    for task in sorted(dataset, key=lambda t: t.canonical()):
        samples = dataset[task]
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            chunk = [samples[i] for i in order[start : start + batch_size]]
            limit = float(limit_pool[int(rng.integers(len(limit_pool)))])
            images, labels = _stack(chunk)
            batches.append(Batch(task=task, limit=limit, images=images, labels=labels))
    rng.shuffle(batches)
    return batches


@dataclass
class JointCheckpoint:
    spec: SupernetSpec
    layout: GateLayout
    supernet: nn.Module
    assembler: Assembler
    task_vocabulary: tuple[str, ...]
    config: TrainingConfig
    metrics: list[dict] = field(default_factory=list)


@contextlib.contextmanager
def _batchnorm_eval(module: nn.Module):
    """BatchNorm falls back to running statistics (single-row batches)."""
    bns = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.training]
    for m in bns:
        m.eval()
    try:
        yield
    finally:
        for m in bns:
            m.train()


def _split_train_val(dataset, val_fraction):
    train, val = {}, {}
    for task, samples in dataset.items():
        k = int(round(val_fraction * len(samples)))
        if k == 0:
            train[task] = samples
        else:
            train[task] = samples[:-k]
            val[task] = samples[-k:]
    return train, val


def _make_optimizer(config: TrainingConfig, params):
    if config.optimizer == "adam0":
        return torch.optim.Adam(params, lr=config.learning_rate, betas=(0.0, 0.999))
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.RMSprop(params, lr=config.learning_rate)


def _validation_accuracy(supernet, assembler, val_split, limit, batch_size=256):
    accs = {}
    supernet.eval()
    with torch.no_grad():
        for task in sorted(val_split, key=lambda t: t.canonical()):
            gates = generate_gates(GenerationRequest(task, limit), assembler).to_tensors()
            correct = total = 0
            samples = val_split[task]
            for start in range(0, len(samples), batch_size):
                images, labels = _stack(samples[start : start + batch_size])
                logits = supernet(torch.from_numpy(images), gates)
                correct += int((logits.argmax(dim=1).numpy() == labels).sum())
                total += len(labels)
            accs[task.canonical()] = correct / total
    supernet.train()
    return accs


def train_joint(
    supernet: nn.Module,
    assembler: Assembler,
    dataset: dict[TaskDescriptor, list[LabeledSample]],
    config: TrainingConfig,
    log=None,
    epoch_hook=None,
) -> JointCheckpoint:
    """Jointly optimize supernet and assembler on mixed-task batches."""
    if len(dataset) < 2:
        raise ValueError("joint training needs at least 2 tasks")
    layout = supernet.gate_layout
    torch.manual_seed(config.seed)
    train_split, val_split = _split_train_val(dataset, config.val_fraction)

    params = list(supernet.parameters()) + list(assembler.parameters())
    optimizer = _make_optimizer(config, params)
    n_batches_per_epoch = sum(-(-len(s) // config.batch_size) for s in train_split.values())
    steps_per_epoch = -(-n_batches_per_epoch // config.tasks_per_step)
    scheduler = None
    if config.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=max(1, steps_per_epoch * config.epochs)
        )

    coin = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    metrics: list[dict] = []
    consecutive_bad = 0
    supernet.train()
    assembler.train()

    for epoch in range(config.epochs):
        batches = make_batches(
            train_split, config.limit_pool, config.batch_size, seed=config.seed * 100_003 + epoch
        )
        tl_sum = gl_sum = loss_sum = 0.0
        n_batches = 0
        ratio_by_limit: dict[float, list[float]] = {}
        for start in range(0, len(batches), config.tasks_per_step):
            group = batches[start : start + config.tasks_per_step]
            enc = np.stack(
                [encode_requirement(GenerationRequest(b.task, b.limit), assembler.limit_dim) for b in group]
            )
            ctx = _batchnorm_eval(assembler) if len(group) == 1 else contextlib.nullcontext()
            with ctx:
                logits = assembler(torch.from_numpy(enc.astype(np.float32)))
            group_terms = []
            group_ok = True
            for j, batch in enumerate(group):
                mode = STRAIGHT_THROUGH if coin.random() < 0.5 else SOFT
                gate_vectors = {lid: semhash_discretize(w[j], mode) for lid, w in logits.items()}
                out = supernet(torch.from_numpy(batch.images), gate_vectors)
                flat_gates = torch.cat([gate_vectors[lid] for lid in layout.layer_ids])
                loss, tl, gl = total_loss(
                    out, torch.from_numpy(batch.labels), flat_gates, batch.limit, config.gate_loss_weight
                )
                if not torch.isfinite(loss):
                    consecutive_bad += 1
                    group_ok = False
                    if consecutive_bad >= 3:
                        raise TrainingDivergedError(
                            f"loss non-finite for {consecutive_bad} consecutive batches (epoch {epoch})"
                        )
                    continue
                consecutive_bad = 0
                group_terms.append(loss)
                tl_sum += tl.detach().item()
                gl_sum += gl.detach().item() if isinstance(gl, torch.Tensor) else float(gl)
                loss_sum += loss.detach().item()
                n_batches += 1
                hard_ratio = float(
                    np.concatenate([(w[j].detach().numpy() > 0) for w in logits.values()]).mean()
                )
                ratio_by_limit.setdefault(batch.limit, []).append(hard_ratio)
            if group_terms and group_ok:
                total = torch.stack(group_terms).mean()
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
            if scheduler is not None:
                scheduler.step()

        record = {
            "epoch": epoch,
            "mean_loss": loss_sum / max(1, n_batches),
            "mean_tl": tl_sum / max(1, n_batches),
            "mean_gl": gl_sum / max(1, n_batches),
            "activation_ratio": {
                f"{limit:g}": float(np.mean(vals)) for limit, vals in sorted(ratio_by_limit.items())
            },
        }
        if val_split:
            record["val_accuracy"] = _validation_accuracy(supernet, assembler, val_split, config.val_limit)
            record["val_accuracy_mean"] = float(np.mean(list(record["val_accuracy"].values())))
        metrics.append(record)
        if log is not None:
            log(record)
        if epoch_hook is not None:
            epoch_hook(epoch, supernet, assembler)
            supernet.train()
            assembler.train()

    supernet.eval()
    assembler.eval()
    vocabulary = tuple(sorted(t.canonical() for t in dataset))
    return JointCheckpoint(
        spec=supernet.spec,
        layout=layout,
        supernet=supernet,
        assembler=assembler,
        task_vocabulary=vocabulary,
        config=config,
        metrics=metrics,
    )


def evaluate(
    checkpoint: JointCheckpoint,
    tasks,
    dataset: dict[TaskDescriptor, list[LabeledSample]],
    limit: float,
    batch_size: int = 256,
) -> dict[str, dict]:
    """Per-task accuracy and realized activation ratio at one limit."""
    supernet, assembler = checkpoint.supernet, checkpoint.assembler
    supernet.eval()
    results: dict[str, dict] = {}
    with torch.no_grad():
        for task in tasks:
            if task not in dataset:
                raise ValueError(f"no evaluation data for task {task.canonical()}")
            gates = generate_gates(GenerationRequest(task, limit), assembler)
            tensors = gates.to_tensors()
            samples = dataset[task]
            correct = 0
            for start in range(0, len(samples), batch_size):
                images, labels = _stack(samples[start : start + batch_size])
                logits = supernet(torch.from_numpy(images), tensors)
                correct += int((logits.argmax(dim=1).numpy() == labels).sum())
            results[task.canonical()] = {
                "accuracy": correct / len(samples),
                "activation_ratio": gates.activation_ratio(),
            }
    return results


def _module_state(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": value.detach().cpu().numpy().astype(np.float32)
        for name, value in module.state_dict().items()
        if not name.endswith("num_batches_tracked")
    }


def save_checkpoint(checkpoint: JointCheckpoint, path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": checkpoint.spec.to_json(),
        "layout": checkpoint.layout.to_json(),
        "task_vocabulary": list(checkpoint.task_vocabulary),
        "config": asdict(checkpoint.config),
        "assembler": {
            "limit_dim": checkpoint.assembler.limit_dim,
            "d_sel": checkpoint.assembler.d_sel,
            "num_gaters": checkpoint.assembler.num_gaters,
        },
    }
    with open(out / MANIFEST_FILE, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    tensors = _module_state(checkpoint.supernet, "supernet")
    tensors.update(_module_state(checkpoint.assembler, "assembler"))
    blobio.save_tensors(out / PARAMS_FILE, tensors)
    with open(out / METRICS_FILE, "w") as f:
        for record in checkpoint.metrics:
            f.write(json.dumps(record) + "\n")
    return out


def _load_module_state(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str):
    state = {}
    for name, arr in tensors.items():
        if name.startswith(prefix + "."):
            state[name[len(prefix) + 1 :]] = torch.from_numpy(arr.copy())
    missing, unexpected = module.load_state_dict(state, strict=False)
    missing = [n for n in missing if not n.endswith("num_batches_tracked")]
    if missing or unexpected:
        raise CheckpointError(f"checkpoint state does not match {prefix}: missing={missing} unexpected={unexpected}")


def load_checkpoint(path: str | Path) -> JointCheckpoint:
    root = Path(path)
    manifest_path = root / MANIFEST_FILE
    if not manifest_path.is_file():
        raise CheckpointError(f"not a checkpoint directory (no {MANIFEST_FILE}): {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    spec = SupernetSpec.from_json(manifest["spec"])
    layout = GateLayout.from_json(manifest["layout"])
    if layout != spec.gate_layout():
        raise CheckpointError("checkpoint layout does not match its supernet spec")
    config_data = dict(manifest["config"])
    config_data["limit_pool"] = tuple(config_data["limit_pool"])
    config = TrainingConfig(**config_data)
    supernet = build_supernet(spec, seed=config.seed)
    a = manifest["assembler"]
    assembler = Assembler(layout, limit_dim=a["limit_dim"], d_sel=a["d_sel"], num_gaters=a["num_gaters"])
    tensors = blobio.load_tensors(root / PARAMS_FILE)
    _load_module_state(supernet, tensors, "supernet")
    _load_module_state(assembler, tensors, "assembler")
    supernet.eval()
    assembler.eval()
    metrics = []
    metrics_path = root / METRICS_FILE
    if metrics_path.is_file():
        with open(metrics_path) as f:
            metrics = [json.loads(line) for line in f if line.strip()]
    return JointCheckpoint(
        spec=spec,
        layout=layout,
        supernet=supernet,
        assembler=assembler,
        task_vocabulary=tuple(manifest["task_vocabulary"]),
        config=config,
        metrics=metrics,
    )


def checkpoint_hash(path: str | Path) -> str:
    """Content hash of a saved checkpoint's parameter blob."""
    params = Path(path) / PARAMS_FILE
    if not params.is_file():
        raise CheckpointError(f"no parameter blob at {params}")
    return blobio.file_sha256(params)
