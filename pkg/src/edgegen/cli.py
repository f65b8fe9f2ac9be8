"""Command-line pipeline: synth -> train -> profile -> fit-predictor -> generate / eval.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Artifacts
reference their input checkpoint by content hash and commands refuse
mismatched hashes.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import config as config_mod
from . import dataset as dataset_mod
from . import perfmodel, training
from .search import SearchConfig, generate_model
from .assembler import build_assembler
from .config import ConfigError, PipelineConfig
from .extraction import SubnetArtifact
from .supernet import build_supernet
from .tasks import EdgeScenario, TaskDescriptor, TaskParseError, all_tasks

USAGE_EXIT = 2
FAILURE_EXIT = 1


class UsageError(Exception):
    pass


def _parse_task_list(spec: str) -> list[TaskDescriptor]:
    if spec.strip().lower() == "all":
        return all_tasks()
    tasks = [TaskDescriptor.parse(tok) for tok in spec.split(",") if tok.strip()]
    if not tasks:
        raise UsageError("empty task list")
    return tasks


def _load_pipeline_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return config_mod.load_config(path)


def cmd_synth(args) -> int:
    tasks = _parse_task_list(args.tasks)
    data = dataset_mod.synthesize_dataset(
        tasks, per_task=args.per_task, seed=args.seed, source=args.source, external_dir=args.external_dir
    )
    out = dataset_mod.save_dataset(data, args.out)
    cfg = PipelineConfig(seed=args.seed)
    config_mod.write_effective_config(
        cfg,
        out,
        extras={
            "command": "synth",
            "tasks": args.tasks,
            "per_task": args.per_task,
            "source": args.source,
        },
    )
    total = sum(len(v) for v in data.values())
    print(f"wrote {total} samples for {len(data)} tasks to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_pipeline_config(args.config)
    data = dataset_mod.load_dataset(args.data)
    if len(data) < 2:
        raise UsageError("training data must cover at least 2 tasks")

    if args.resume:
        checkpoint = training.load_checkpoint(args.resume)
        data_vocab = tuple(sorted(t.canonical() for t in data))
        if data_vocab != checkpoint.task_vocabulary:
            raise UsageError(
                "task vocabulary drift: checkpoint was trained on "
                f"{list(checkpoint.task_vocabulary)} but --data holds {list(data_vocab)}"
            )
        supernet, assembler = checkpoint.supernet, checkpoint.assembler
        cfg.training = checkpoint.config
        prior_metrics = checkpoint.metrics
    else:
        supernet = build_supernet(cfg.supernet, seed=cfg.seed)
        assembler = build_assembler(
            cfg.supernet.gate_layout(),
            limit_dim=cfg.assembler.limit_dim,
            d_sel=cfg.assembler.d_sel,
            num_gaters=cfg.assembler.num_gaters,
            seed=cfg.seed,
        )
        prior_metrics = []

    def log(record):
        val = record.get("val_accuracy_mean")
        val_text = f" val_acc={val:.4f}" if val is not None else ""
        ratios = " ".join(f"r@{k}={v:.3f}" for k, v in record["activation_ratio"].items())
        print(
            f"epoch {record['epoch']:3d} loss={record['mean_loss']:.4f} "
            f"tl={record['mean_tl']:.4f} gl={record['mean_gl']:.6f} {ratios}{val_text}",
            flush=True,
        )

    supernet.train()
    assembler.train()
    checkpoint = training.train_joint(supernet, assembler, data, cfg.training, log=log)
    checkpoint.metrics = prior_metrics + checkpoint.metrics
    out = training.save_checkpoint(checkpoint, args.out)
    config_mod.write_effective_config(cfg, out, extras={"command": "train", "data": str(args.data)})
    print(f"saved checkpoint to {out} (hash {training.checkpoint_hash(out)[:16]})")
    return 0


def cmd_profile(args) -> int:
    cfg = _load_pipeline_config(args.config)
    checkpoint = training.load_checkpoint(args.ckpt)
    ckpt_hash = training.checkpoint_hash(args.ckpt)
    gates = perfmodel.sample_random_gates(
        checkpoint.layout,
        count=args.subnets,
        ratio_range=(cfg.profiling.ratio_min, cfg.profiling.ratio_max),
        seed=args.seed,
    )
    last_report = [0.0]

    def progress(done, total):
        if time.monotonic() - last_report[0] > 10:
            last_report[0] = time.monotonic()
            print(f"profiled {done}/{total} subnets", flush=True)

    profile = perfmodel.profile_subnets(
        checkpoint.supernet,
        gates,
        warmup=args.warmup,
        repeats=args.repeats,
        device_label=args.device_label,
        checkpoint_hash=ckpt_hash,
        progress=progress,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    profile.save(out)
    config_mod.write_effective_config(
        cfg, out.parent, extras={"command": "profile", "ckpt": str(args.ckpt), "subnets": args.subnets}
    )
    print(f"profiled {len(profile.samples)} subnets ({profile.skipped} skipped) -> {out}")
    return 0


def cmd_fit_predictor(args) -> int:
    profile = perfmodel.DeviceProfile.load(args.profile)
    predictor = perfmodel.fit_predictor(profile, holdout_fraction=args.holdout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    predictor.save(out)
    print(f"latency holdout accuracy (1 - MAPE): {predictor.latency_holdout_accuracy:.4f}")
    print(f"memory holdout accuracy (1 - MAPE): {predictor.memory_holdout_accuracy:.4f}")
    print(f"saved predictor to {out}")
    return 0


def cmd_generate(args) -> int:
    if args.lat_budget_ms is None and args.mem_budget_mb is None:
        raise UsageError("at least one budget is required (--lat-budget-ms / --mem-budget-mb)")
    task = TaskDescriptor.parse(args.task)
    checkpoint = training.load_checkpoint(args.ckpt)
    ckpt_hash = training.checkpoint_hash(args.ckpt)
    predictor = perfmodel.PerformancePredictor.load(args.perf)
    if predictor.checkpoint_hash and predictor.checkpoint_hash != ckpt_hash:
        raise UsageError(
            f"predictor was fitted for checkpoint {predictor.checkpoint_hash[:16]} "
            f"but --ckpt has hash {ckpt_hash[:16]}"
        )
    scenario = EdgeScenario(
        task=task,
        latency_budget_ms=args.lat_budget_ms,
        memory_budget_bytes=None if args.mem_budget_mb is None else int(args.mem_budget_mb * 1024 * 1024),
    )
    search_cfg = SearchConfig(
        start_limit=args.start_limit,
        step=args.step,
        max_limit=args.max_limit,
        enforce_limit=not args.no_enforce_limit,
    )
    t0 = time.perf_counter()
    artifact, result = generate_model(scenario, checkpoint, predictor, search_cfg, checkpoint_id=ckpt_hash)
    wall = time.perf_counter() - t0
    out = artifact.save(args.out)
    with open(out / "search-trace.log", "w") as f:
        for line in result.trace:
            f.write(line.format_line() + "\n")
    cfg = _load_pipeline_config(args.config)
    cfg.search = search_cfg
    config_mod.write_effective_config(
        cfg, out, extras={"command": "generate", "task": args.task, "ckpt": str(args.ckpt)}
    )
    for line in result.trace:
        print(line.format_line())
    print(
        f"chose limit {result.limit:g} ratio={result.gates.activation_ratio():.4f} "
        f"lat={result.predicted_latency_ms:.3f}ms mem={result.predicted_memory_bytes:.0f}B "
        f"rounds={result.rounds} wall={wall:.3f}s"
    )
    print(f"saved subnet artifact to {out}")
    return 0


def cmd_eval(args) -> int:
    if (args.ckpt is None) == (args.subnet is None):
        raise UsageError("exactly one of --ckpt or --subnet is required")
    data = dataset_mod.load_dataset(args.data)
    if args.ckpt is not None:
        checkpoint = training.load_checkpoint(args.ckpt)
        if args.tasks is None:
            tasks = sorted(data, key=lambda t: t.canonical())
        else:
            tasks = _parse_task_list(args.tasks)
        if args.limit is None:
            raise UsageError("--limit is required with --ckpt")
        results = training.evaluate(checkpoint, tasks, data, limit=args.limit)
    else:
        artifact = SubnetArtifact.load(args.subnet)
        task = TaskDescriptor.parse(args.task if args.tasks is None else args.tasks)
        results = _evaluate_artifact(artifact, task, data)
    print(f"{'task':<22} {'accuracy':>9} {'act_ratio':>10}")
    for name, row in results.items():
        print(f"{name:<22} {row['accuracy']:>9.4f} {row['activation_ratio']:>10.4f}")
    mean_acc = sum(r["accuracy"] for r in results.values()) / len(results)
    print(f"mean accuracy: {mean_acc:.4f}")
    return 0


def _evaluate_artifact(artifact: SubnetArtifact, task: TaskDescriptor, data) -> dict:
    import numpy as np
    import torch

    if task not in data:
        raise UsageError(f"no evaluation data for task {task.canonical()}")
    model = artifact.build_module()
    samples = data[task]
    correct = 0
    with torch.no_grad():
        for start in range(0, len(samples), 256):
            chunk = samples[start : start + 256]
            images = np.stack([s.image for s in chunk])[:, None].astype(np.float32)
            labels = np.array([s.label for s in chunk])
            pred = model(torch.from_numpy(images)).argmax(dim=1).numpy()
            correct += int((pred == labels).sum())
    total_modules = sum(len(v) for v in artifact.retained.values())
    layout = artifact.spec.gate_layout()
    return {
        task.canonical(): {
            "accuracy": correct / len(samples),
            "activation_ratio": total_modules / layout.total_modules,
        }
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgegen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a labeled four-digit dataset")
    p.add_argument("--tasks", required=True, help="'all' or comma-separated task strings like has:digit0")
    p.add_argument("--per-task", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source", choices=[dataset_mod.PROCEDURAL, dataset_mod.EXTERNAL], default=dataset_mod.PROCEDURAL)
    p.add_argument("--external-dir", default=None, help="digit corpus directory for --source external")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="jointly train supernet and assembler")
    p.add_argument("--config", default=None, help="pipeline config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("profile", help="measure random subnets on this host")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--subnets", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--device-label", default="host")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("fit-predictor", help="fit the linear latency/memory predictor")
    p.add_argument("--profile", required=True)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_predictor)

    p = sub.add_parser("generate", help="generate a budget-fitting subnet for a task")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--perf", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--lat-budget-ms", type=float, default=None)
    p.add_argument("--mem-budget-mb", type=float, default=None)
    p.add_argument("--start-limit", type=float, default=0.01)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--max-limit", type=float, default=1.0)
    p.add_argument("--no-enforce-limit", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="accuracy table for a checkpoint or artifact")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--subnet", default=None)
    p.add_argument("--tasks", default=None, help="'all' or comma-separated; defaults to tasks in --data")
    p.add_argument("--task", default=None, help="single task for --subnet evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=float, default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (TaskParseError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(f"error: {exc}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
