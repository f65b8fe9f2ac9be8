"""Shared fixtures. The trained desk checkpoint is expensive (tens of
minutes on CPU) and is built once per session, only when an acceptance
test asks for it. Set EDGEGEN_DESK_CHECKPOINT to reuse a directory
produced by an earlier run (it is retrained only if absent)."""

import os
from pathlib import Path

import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--desk-epochs",
        type=int,
        default=int(os.environ.get("EDGEGEN_DESK_EPOCHS", "34")),
        help="epoch budget for the desk-scale acceptance training run",
    )


@pytest.fixture(scope="session")
def desk_paths(request, tmp_path_factory):
    env = os.environ.get("EDGEGEN_DESK_CHECKPOINT")
    if env:
        root = Path(env)
        root.mkdir(parents=True, exist_ok=True)
    else:
        root = tmp_path_factory.mktemp("desk")
    return root


@pytest.fixture(scope="session")
def desk_run(request, desk_paths):
    """Train (or reload) the desk-scale reference checkpoint.

    Returns a dict with the checkpoint, its directory, the task split,
    and the held-out test datasets used by the quality criteria.
    """
    from edgegen import load_checkpoint, save_checkpoint, synthesize_dataset
    from edgegen.tasks import enumerate_task_space, select_covering_tasks

    import tests.desk_setup as desk_setup

    epochs = request.config.getoption("--desk-epochs")
    root = desk_paths
    ckpt_dir = root / "checkpoint"
    train_pool, unseen_tasks = enumerate_task_space(hold_out=0.1, seed=0)
    train_tasks = select_covering_tasks(train_pool, desk_setup.TRAIN_TASK_COUNT, seed=0)

    if (ckpt_dir / "manifest.json").is_file():
        checkpoint = load_checkpoint(ckpt_dir)
    else:
        checkpoint = desk_setup.train_desk_checkpoint(train_tasks, epochs)
        save_checkpoint(checkpoint, ckpt_dir)

    test_known = synthesize_dataset(train_tasks, per_task=100, seed=77_000)
    test_unseen = synthesize_dataset(unseen_tasks, per_task=100, seed=77_000)
    return {
        "checkpoint": checkpoint,
        "ckpt_dir": ckpt_dir,
        "train_tasks": train_tasks,
        "unseen_tasks": unseen_tasks,
        "test_known": test_known,
        "test_unseen": test_unseen,
    }
