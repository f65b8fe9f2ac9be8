"""Synthetic four-digit image datasets with oracle-consistent labels.

Each sample is a 2x2 grid of digit glyphs (28x28 cells -> 56x56 image by
default). The procedural source draws seven-segment-style bitmaps with
positional jitter and intensity noise, so the package needs no dataset
download; the external source ingests a user-supplied per-class digit
image corpus instead.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tasks import TaskDescriptor, evaluate_predicate

CELL_SIZE = 28
GRID = 2
DEFAULT_IMAGE_SIZE = CELL_SIZE * GRID

PROCEDURAL = "procedural"
EXTERNAL = "external"

DATASET_FORMAT_VERSION = 1
INDEX_FILE = "index.json"
METADATA_FILE = "metadata.jsonl"


class GenerationError(RuntimeError):
    pass


class IngestionError(RuntimeError):
    pass


@dataclass
class LabeledSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    digits: tuple[int, int, int, int]
    task: TaskDescriptor
    label: int


# Seven-segment membership per digit: (A top, B top-right, C bottom-right,
# D bottom, E bottom-left, F top-left, G middle).
_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABDEG",
    3: "ABCDG",
    4: "BCFG",
    5: "ACDFG",
    6: "ACDEFG",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}

_GLYPH_W, _GLYPH_H, _STROKE = 16, 22, 3

# Segment rectangles as (row0, row1, col0, col1) within the glyph box.
_SEGMENT_RECTS = {
    "A": (0, _STROKE, 0, _GLYPH_W),
    "G": (_GLYPH_H // 2 - 1, _GLYPH_H // 2 + 2, 0, _GLYPH_W),
    "D": (_GLYPH_H - _STROKE, _GLYPH_H, 0, _GLYPH_W),
    "F": (0, _GLYPH_H // 2 + 1, 0, _STROKE),
    "B": (0, _GLYPH_H // 2 + 1, _GLYPH_W - _STROKE, _GLYPH_W),
    "E": (_GLYPH_H // 2, _GLYPH_H, 0, _STROKE),
    "C": (_GLYPH_H // 2, _GLYPH_H, _GLYPH_W - _STROKE, _GLYPH_W),
}


def glyph_bitmap(digit: int) -> np.ndarray:
    """Deterministic (22, 16) unit-intensity bitmap for one digit."""
    canvas = np.zeros((_GLYPH_H, _GLYPH_W), dtype=np.float32)
    for seg in _SEGMENTS[digit]:
        r0, r1, c0, c1 = _SEGMENT_RECTS[seg]
        canvas[r0:r1, c0:c1] = 1.0
    return canvas


class _ProceduralGlyphs:
    def draw(self, digit: int, rng: np.random.Generator) -> np.ndarray:
        cell = np.zeros((CELL_SIZE, CELL_SIZE), dtype=np.float32)
        base_r = (CELL_SIZE - _GLYPH_H) // 2
        base_c = (CELL_SIZE - _GLYPH_W) // 2
        jr = base_r + int(rng.integers(-2, 3))
        jc = base_c + int(rng.integers(-2, 3))
        intensity = 1.0 + float(rng.uniform(-0.15, 0.15))
        glyph = glyph_bitmap(digit) * intensity
        cell[jr : jr + _GLYPH_H, jc : jc + _GLYPH_W] = glyph
        return np.clip(cell, 0.0, 1.0)


class _ExternalGlyphs:
    """Digit glyphs drawn from a directory of per-class image files."""

    SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}

    def __init__(self, corpus_dir: str | Path):
        root = Path(corpus_dir)
        if not root.is_dir():
            raise IngestionError(f"digit corpus directory not found: {root}")
        self.pools: dict[int, list[Path]] = {}
        for digit in range(10):
            class_dir = root / str(digit)
            if not class_dir.is_dir():
                raise IngestionError(f"missing class directory for digit {digit}: {class_dir}")
            files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in self.SUFFIXES)
            if not files:
                raise IngestionError(f"no images for digit {digit} under {class_dir}")
            self.pools[digit] = files

    def draw(self, digit: int, rng: np.random.Generator) -> np.ndarray:
        path = self.pools[digit][int(rng.integers(len(self.pools[digit])))]
        try:
            with Image.open(path) as img:
                img = img.convert("L").resize((CELL_SIZE, CELL_SIZE), Image.BILINEAR)
                return np.asarray(img, dtype=np.float32) / 255.0
        except OSError as exc:
            raise IngestionError(f"unreadable digit image {path}: {exc}") from exc


def _digit_pools(task: TaskDescriptor) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    positives, negatives = [], []
    for quad in itertools.product(range(10), repeat=4):
        (positives if evaluate_predicate(task, quad) else negatives).append(quad)
    return positives, negatives


def render_quadruple(digits: Sequence[int], glyphs, rng: np.random.Generator) -> np.ndarray:
    """Compose four digit cells into a 2x2 grid image."""
    image = np.zeros((DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE), dtype=np.float32)
    for k, digit in enumerate(digits):
        r, c = divmod(k, GRID)
        cell = glyphs.draw(int(digit), rng)
        image[r * CELL_SIZE : (r + 1) * CELL_SIZE, c * CELL_SIZE : (c + 1) * CELL_SIZE] = cell
    return image


def synthesize_dataset(
    tasks: Sequence[TaskDescriptor],
    per_task: int,
    seed: int,
    source: str = PROCEDURAL,
    external_dir: str | Path | None = None,
) -> dict[TaskDescriptor, list[LabeledSample]]:
    """Per-task samples with balanced labels (|#pos - #neg| <= 1).

    Deterministic given (tasks, per_task, seed); each task draws from its
    own RNG stream so adding tasks does not perturb existing ones.
    """
    if not tasks:
        raise ValueError("need at least one task")
    if per_task < 2:
        raise ValueError("per_task must be >= 2")
    if source == PROCEDURAL:
        glyphs = _ProceduralGlyphs()
    elif source == EXTERNAL:
        if external_dir is None:
            raise IngestionError("external source requires a digit corpus directory")
        glyphs = _ExternalGlyphs(external_dir)
    else:
        raise ValueError(f"unknown source {source!r}")

    dataset: dict[TaskDescriptor, list[LabeledSample]] = {}
    children = np.random.SeedSequence(seed).spawn(len(tasks))
    for task, child in zip(tasks, children):
        rng = np.random.default_rng(child)
        positives, negatives = _digit_pools(task)
        if not positives:
            raise GenerationError(f"task {task.canonical()} has no satisfying digit quadruple")
        if not negatives:
            raise GenerationError(f"task {task.canonical()} has no violating digit quadruple")
        n_pos = per_task - per_task // 2
        labels = [1] * n_pos + [0] * (per_task - n_pos)
        labels = [labels[i] for i in rng.permutation(per_task)]
        samples = []
        for label in labels:
            pool = positives if label else negatives
            quad = pool[int(rng.integers(len(pool)))]
            image = render_quadruple(quad, glyphs, rng)
            samples.append(LabeledSample(image=image, digits=quad, task=task, label=label))
        dataset[task] = samples
    return dataset


def save_dataset(dataset: dict[TaskDescriptor, list[LabeledSample]], out_dir: str | Path) -> Path:
    """One directory per task: PNG images plus a JSONL metadata record each."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"format_version": DATASET_FORMAT_VERSION, "image_size": DEFAULT_IMAGE_SIZE, "tasks": {}}
    for task, samples in dataset.items():
        task_dir = out / task.canonical()
        task_dir.mkdir(exist_ok=True)
        with open(task_dir / METADATA_FILE, "w") as meta:
            for i, sample in enumerate(samples):
                name = f"{i:05d}.png"
                pixels = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(pixels, mode="L").save(task_dir / name)
                record = {"file": name, "digits": list(sample.digits), "label": sample.label}
                meta.write(json.dumps(record) + "\n")
        index["tasks"][task.canonical()] = len(samples)
    with open(out / INDEX_FILE, "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return out


def load_dataset(path: str | Path) -> dict[TaskDescriptor, list[LabeledSample]]:
    root = Path(path)
    index_path = root / INDEX_FILE
    if not index_path.is_file():
        raise IngestionError(f"not a dataset directory (no {INDEX_FILE}): {root}")
    with open(index_path) as f:
        index = json.load(f)
    if index.get("format_version") != DATASET_FORMAT_VERSION:
        raise IngestionError(f"unsupported dataset format version {index.get('format_version')}")
    dataset: dict[TaskDescriptor, list[LabeledSample]] = {}
    for task_name, count in index["tasks"].items():
        task = TaskDescriptor.parse(task_name)
        task_dir = root / task_name
        samples = []
        with open(task_dir / METADATA_FILE) as meta:
            for line in meta:
                record = json.loads(line)
                with Image.open(task_dir / record["file"]) as img:
                    image = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
                samples.append(
                    LabeledSample(
                        image=image,
                        digits=tuple(record["digits"]),
                        task=task,
                        label=int(record["label"]),
                    )
                )
        if len(samples) != count:
            raise IngestionError(f"task {task_name}: index lists {count} samples, found {len(samples)}")
        dataset[task] = samples
    return dataset
