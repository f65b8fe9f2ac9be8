"""Calibration run for the desk-scale training setup.

Trains the default mini-CNN on a covering subset of the 90% task split and
reports known/unseen test accuracy at several limits every few epochs, so
the epoch budget for the reference run can be chosen from real curves.
"""

import argparse
import json
import time

import numpy as np

from edgegen import (
    JointCheckpoint,
    SupernetSpec,
    TrainingConfig,
    build_assembler,
    build_supernet,
    enumerate_task_space,
    evaluate,
    synthesize_dataset,
    train_joint,
)
from edgegen.tasks import select_covering_tasks


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--tasks", type=int, default=20)
    parser.add_argument("--per-task", type=int, default=500)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--eval-every", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tasks-per-step", type=int, default=4)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--out", default="/tmp/calibration.jsonl")
    args = parser.parse_args()

    t0 = time.time()
    train_pool, unseen = enumerate_task_space(hold_out=0.1, seed=args.seed)
    train_tasks = select_covering_tasks(train_pool, args.tasks, seed=args.seed)
    print(f"train tasks ({len(train_tasks)}):", [t.canonical() for t in train_tasks], flush=True)
    print(f"unseen tasks ({len(unseen)}):", [t.canonical() for t in unseen], flush=True)

    data = synthesize_dataset(train_tasks, per_task=args.per_task, seed=args.seed)
    test_known = synthesize_dataset(train_tasks, per_task=100, seed=args.seed + 10_000)
    test_unseen = synthesize_dataset(unseen, per_task=100, seed=args.seed + 10_000)
    print(f"data ready at {time.time() - t0:.0f}s", flush=True)

    spec = SupernetSpec()
    supernet = build_supernet(spec, seed=args.seed)
    assembler = build_assembler(spec.gate_layout(), seed=args.seed)
    config = TrainingConfig(
        epochs=args.epochs,
        seed=args.seed,
        hold_out=0.1,
        tasks_per_step=args.tasks_per_step,
        learning_rate=args.lr,
    )
    log_file = open(args.out, "w")

    def epoch_hook(epoch, net, asm):
        if (epoch + 1) % args.eval_every != 0 and epoch != config.epochs - 1:
            return
        ckpt = JointCheckpoint(
            spec=spec, layout=net.gate_layout, supernet=net, assembler=asm,
            task_vocabulary=(), config=config,
        )
        for limit in (0.03, 0.10):
            known = evaluate(ckpt, train_tasks, test_known, limit=limit)
            uns = evaluate(ckpt, unseen, test_unseen, limit=limit)
            row = {
                "epoch": epoch,
                "limit": limit,
                "known_acc": float(np.mean([r["accuracy"] for r in known.values()])),
                "known_ratio": float(np.mean([r["activation_ratio"] for r in known.values()])),
                "unseen_acc": float(np.mean([r["accuracy"] for r in uns.values()])),
                "elapsed_s": round(time.time() - t0),
            }
            print("EVAL", json.dumps(row), flush=True)
            log_file.write(json.dumps(row) + "\n")
            log_file.flush()

    train_joint(
        supernet,
        assembler,
        data,
        config,
        log=lambda r: print(
            f"epoch {r['epoch']:3d} loss={r['mean_loss']:.4f} tl={r['mean_tl']:.4f} "
            f"gl={r['mean_gl']:.6f} val={r.get('val_accuracy_mean', -1):.4f} "
            + " ".join(f"r@{k}={v:.3f}" for k, v in r["activation_ratio"].items()),
            flush=True,
        ),
        epoch_hook=epoch_hook,
    )
    print(f"total {time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
