"""End-to-end desk-scale pipeline driven through the CLI.

Synthesizes data for a covering subset of the 90% task split, trains the
joint checkpoint, profiles this host, fits the predictor, generates one
subnet per example scenario, and prints accuracy tables.
"""

import argparse
import sys
import time
from pathlib import Path

from edgegen.cli import main as cli
from edgegen.tasks import enumerate_task_space, select_covering_tasks


def run(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_pool, unseen = enumerate_task_space(hold_out=0.1, seed=args.seed)
    train_tasks = select_covering_tasks(train_pool, args.tasks, seed=args.seed)
    task_list = ",".join(t.canonical() for t in train_tasks)

    config = out / "config.txt"
    config.write_text(
        f"seed = {args.seed}\n"
        f"training.epochs = {args.epochs}\n"
        "training.hold_out = 0.1\n"
    )

    steps = [
        ["synth", "--tasks", task_list, "--per-task", str(args.per_task),
         "--seed", str(args.seed), "--out", str(out / "data")],
        ["train", "--config", str(config), "--data", str(out / "data"),
         "--out", str(out / "ckpt")],
        ["profile", "--ckpt", str(out / "ckpt"), "--subnets", str(args.subnets),
         "--seed", str(args.seed), "--out", str(out / "profile.jsonl")],
        ["fit-predictor", "--profile", str(out / "profile.jsonl"),
         "--out", str(out / "predictor.json")],
    ]
    for step in steps:
        print(f"\n=== edgegen {' '.join(step[:1])} ===", flush=True)
        code = cli(step)
        if code != 0:
            return code

    scenario_task = train_tasks[0].canonical()
    print(f"\n=== edgegen generate ({scenario_task}) ===", flush=True)
    t0 = time.time()
    code = cli(["generate", "--ckpt", str(out / "ckpt"), "--perf", str(out / "predictor.json"),
                "--task", scenario_task, "--lat-budget-ms", str(args.lat_budget_ms),
                "--out", str(out / "model")])
    if code != 0:
        return code
    print(f"generation wall time {time.time() - t0:.2f}s")

    print("\n=== edgegen eval (checkpoint at limit 0.1) ===", flush=True)
    return cli(["eval", "--ckpt", str(out / "ckpt"), "--data", str(out / "data"),
                "--limit", "0.1"])


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--tasks", type=int, default=20)
    parser.add_argument("--per-task", type=int, default=500)
    parser.add_argument("--epochs", type=int, default=34)
    parser.add_argument("--subnets", type=int, default=500)
    parser.add_argument("--lat-budget-ms", type=float, default=3.0)
    parser.add_argument("--seed", type=int, default=0)
    sys.exit(run(parser.parse_args()))
