"""Combinatorial task space: quantifier x subject predicates over four digits.

A task asks a yes/no question about the four digits shown in an image,
e.g. "has:digit0" (is there at least one 0?) or "exactly-2:odd" (are
exactly two of the digits odd?). The 5 quantifiers x 12 subjects give a
space of 60 tasks that share structure through their one-hot encodings.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

LIMIT_ENCODING_DIM = 16


class TaskParseError(ValueError):
    pass


class Quantifier(enum.Enum):
    HAS = "has"
    EXACTLY_1 = "exactly-1"
    EXACTLY_2 = "exactly-2"
    EXACTLY_3 = "exactly-3"
    EXACTLY_4 = "exactly-4"


class Subject(enum.Enum):
    DIGIT_0 = "digit0"
    DIGIT_1 = "digit1"
    DIGIT_2 = "digit2"
    DIGIT_3 = "digit3"
    DIGIT_4 = "digit4"
    DIGIT_5 = "digit5"
    DIGIT_6 = "digit6"
    DIGIT_7 = "digit7"
    DIGIT_8 = "digit8"
    DIGIT_9 = "digit9"
    ODD = "odd"
    EVEN = "even"


QUANTIFIERS = tuple(Quantifier)
SUBJECTS = tuple(Subject)
TASK_ENCODING_DIM = len(QUANTIFIERS) + len(SUBJECTS)

_QUANTIFIER_INDEX = {q: i for i, q in enumerate(QUANTIFIERS)}
_SUBJECT_INDEX = {s: i for i, s in enumerate(SUBJECTS)}


@dataclass(frozen=True)
class TaskDescriptor:
    quantifier: Quantifier
    subject: Subject

    def canonical(self) -> str:
        return f"{self.quantifier.value}:{self.subject.value}"

    @classmethod
    def parse(cls, text: str) -> "TaskDescriptor":
        parts = text.strip().lower().split(":")
        if len(parts) != 2:
            raise TaskParseError(f"task must look like 'has:digit0', got {text!r}")
        quant_token, subj_token = parts
        try:
            quantifier = Quantifier(quant_token)
        except ValueError:
            raise TaskParseError(f"unknown quantifier {quant_token!r} in {text!r}") from None
        try:
            subject = Subject(subj_token)
        except ValueError:
            raise TaskParseError(f"unknown subject {subj_token!r} in {text!r}") from None
        return cls(quantifier, subject)

    def __str__(self) -> str:
        return self.canonical()


@dataclass(frozen=True)
class EdgeScenario:
    """One customization request: a task plus at least one resource budget."""

    task: TaskDescriptor
    latency_budget_ms: float | None = None
    memory_budget_bytes: int | None = None

    def __post_init__(self):
        if self.latency_budget_ms is None and self.memory_budget_bytes is None:
            raise ValueError("scenario needs a latency or a memory budget")
        if self.latency_budget_ms is not None and self.latency_budget_ms <= 0:
            raise ValueError("latency budget must be positive")
        if self.memory_budget_bytes is not None and self.memory_budget_bytes <= 0:
            raise ValueError("memory budget must be positive")


def subject_matches(subject: Subject, digit: int) -> bool:
    if subject is Subject.ODD:
        return digit % 2 == 1
    if subject is Subject.EVEN:
        return digit % 2 == 0
    return digit == _SUBJECT_INDEX[subject]


def evaluate_predicate(task: TaskDescriptor, digits: Sequence[int]) -> int:
    """Ground-truth label for a digit quadruple under a task."""
    if len(digits) != 4 or any(d < 0 or d > 9 for d in digits):
        raise ValueError(f"digits must be four values in 0..9, got {digits!r}")
    count = sum(1 for d in digits if subject_matches(task.subject, d))
    if task.quantifier is Quantifier.HAS:
        return int(count >= 1)
    exact = {
        Quantifier.EXACTLY_1: 1,
        Quantifier.EXACTLY_2: 2,
        Quantifier.EXACTLY_3: 3,
        Quantifier.EXACTLY_4: 4,
    }[task.quantifier]
    return int(count == exact)


def encode_task(task: TaskDescriptor) -> np.ndarray:
    """Two-hot bit vector: 5 quantifier bits followed by 12 subject bits."""
    bits = np.zeros(TASK_ENCODING_DIM, dtype=np.float32)
    bits[_QUANTIFIER_INDEX[task.quantifier]] = 1.0
    bits[len(QUANTIFIERS) + _SUBJECT_INDEX[task.subject]] = 1.0
    return bits


def encode_limit(limit: float, dim: int = LIMIT_ENCODING_DIM) -> np.ndarray:
    """Sinusoidal positional encoding of the activation limit.

    The limit is mapped to the integer percent position p = round(limit * 100)
    and encoded as values[2i] = sin(p / 10000^(2i/dim)),
    values[2i+1] = cos(p / 10000^(2i/dim)).
    """
    if not 0.0 < limit <= 1.0:
        raise ValueError(f"activation limit must be in (0, 1], got {limit}")
    if dim % 2 != 0:
        raise ValueError("limit encoding dimension must be even")
    p = float(round(limit * 100))
    i = np.arange(dim // 2, dtype=np.float64)
    angles = p / np.power(10000.0, 2.0 * i / dim)
    values = np.empty(dim, dtype=np.float32)
    values[0::2] = np.sin(angles)
    values[1::2] = np.cos(angles)
    return values


def all_tasks() -> list[TaskDescriptor]:
    """The full 60-task space in canonical (quantifier-major) order."""
    return [TaskDescriptor(q, s) for q in QUANTIFIERS for s in SUBJECTS]


def enumerate_task_space(hold_out: float, seed: int) -> tuple[list[TaskDescriptor], list[TaskDescriptor]]:
    """Deterministic (train, unseen) split of the 60-task space."""
    if not 0.0 <= hold_out < 1.0:
        raise ValueError(f"hold_out must be in [0, 1), got {hold_out}")
    tasks = all_tasks()
    n_unseen = round(hold_out * len(tasks))
    rng = np.random.default_rng(seed)
    unseen_idx = set(rng.permutation(len(tasks))[:n_unseen].tolist())
    train = [t for i, t in enumerate(tasks) if i not in unseen_idx]
    unseen = [t for i, t in enumerate(tasks) if i in unseen_idx]
    return train, unseen


def select_covering_tasks(tasks: Sequence[TaskDescriptor], count: int, seed: int) -> list[TaskDescriptor]:
    """Deterministic subset that covers every subject and quantifier present.

    Greedy: one task per uncovered subject, then per uncovered quantifier,
    then a random fill up to count. Training on a covering subset lets the
    assembler ground each encoding bit.
    """
    if count > len(tasks):
        raise ValueError(f"cannot select {count} tasks from {len(tasks)}")
    rng = np.random.default_rng(seed)
    pool = [tasks[i] for i in rng.permutation(len(tasks))]
    chosen: list[TaskDescriptor] = []
    for key in (lambda t: t.subject, lambda t: t.quantifier):
        seen = {key(t) for t in chosen}
        for task in pool:
            if len(chosen) >= count:
                break
            if task not in chosen and key(task) not in seen:
                chosen.append(task)
                seen.add(key(task))
    for task in pool:
        if len(chosen) >= count:
            break
        if task not in chosen:
            chosen.append(task)
    return sorted(chosen, key=lambda t: t.canonical())
