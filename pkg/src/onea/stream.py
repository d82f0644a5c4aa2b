"""Step-imbalanced task streams over synthetic Gaussian class clusters.

Class ratios follow an exponential long-tail curve; tasks receive
contiguous head-to-tail slices of that curve holding equal ratio mass, so
the head task absorbs many classes and tail tasks very few. Datasets are
regenerated from the seed on demand and never serialized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .adapter import TaskMeta, freeze
from .errors import ConfigError

FEATURE_DIM = 32       # input dimension of every synthetic sample
MEAN_RADIUS = 4.0      # class means are drawn uniformly on this sphere
NOISE_SCALE = 1.0      # isotropic stddev around each class mean
TRAIN_FRACTION = 0.8


class TaskOrder(enum.Enum):
    PERMUTED_HEAD_TAIL = "permuted"
    DESCENDING = "descending"
    BALANCED = "balanced"


@dataclass(frozen=True)
class StreamSpec:
    total_classes: int
    num_tasks: int
    gamma: float = 0.01
    order: TaskOrder = TaskOrder.PERMUTED_HEAD_TAIL
    samples_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.total_classes < 2:
            raise ConfigError(f"total_classes must be >= 2, got {self.total_classes}")
        if not 1 <= self.num_tasks <= self.total_classes:
            raise ConfigError(
                f"num_tasks must lie in [1, {self.total_classes}], got {self.num_tasks}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not isinstance(self.order, TaskOrder):
            raise ConfigError(f"order must be a TaskOrder, got {self.order!r}")
        if self.samples_per_class < 1:
            raise ConfigError(
                f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit int, got {self.seed}")

    def to_dict(self) -> dict:
        return {"classes": self.total_classes, "tasks": self.num_tasks,
                "gamma": self.gamma, "order": self.order.value,
                "samples_per_class": self.samples_per_class, "seed": self.seed}


@dataclass(frozen=True)
class SyntheticDataset:
    """Per-task train/test split; labels are global class ids."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        for name in ("train_x", "test_x"):
            object.__setattr__(self, name, freeze(getattr(self, name)))
        for name in ("train_y", "test_y"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Task:
    meta: TaskMeta
    data: SyntheticDataset


@dataclass(frozen=True)
class TaskStream:
    spec: StreamSpec
    tasks: tuple[Task, ...]

    def manifest(self) -> dict:
        return {
            "schema_version": 1,
            "spec": self.spec.to_dict(),
            "tasks": [{
                "task_id": t.meta.task_id,
                "class_ids": sorted(t.meta.class_ids),
                "class_count": t.meta.class_count,
                "sample_count": t.meta.sample_count,
            } for t in self.tasks],
        }


def class_ratios(total_classes: int, gamma: float) -> np.ndarray:
    """Exponential long-tail curve r_k = gamma ** (k / (C - 1))."""
    if total_classes < 2:
        raise ConfigError(f"total_classes must be >= 2, got {total_classes}")
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    k = np.arange(total_classes, dtype=np.float64)
    return gamma ** (k / (total_classes - 1))


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    counts = np.floor(shares).astype(int)
    deficit = total - int(counts.sum())
    if deficit < 0:
        raise AssertionError("fractional shares exceed the total")
    order = np.argsort(-(shares - counts), kind="stable")
    counts[order[:deficit]] += 1
    return counts


def allocate_tasks(spec: StreamSpec) -> list[int]:
    """Class counts per task before any task-order permutation.

    The normalized ratio curve is cut into num_tasks contiguous buckets of
    equal cumulative mass (each class k occupies [k, k+1) with uniform
    density); bucket widths become the counts, assigned head-to-tail in
    non-increasing order via largest-remainder rounding with every task
    guaranteed at least one class.
    """
    c, t = spec.total_classes, spec.num_tasks
    if spec.order is TaskOrder.BALANCED:
        if c % t:
            raise ConfigError(
                f"balanced order needs num_tasks to divide total_classes ({c} % {t} != 0)")
        return [c // t] * t
    ratios = class_ratios(c, spec.gamma)
    cum = np.concatenate([[0.0], np.cumsum(ratios / ratios.sum())])
    cum[-1] = 1.0
    cuts = np.interp(np.arange(1, t) / t, cum, np.arange(c + 1, dtype=np.float64))
    widths = np.diff(np.concatenate([[0.0], cuts, [float(c)]]))
    counts = _largest_remainder(widths[::-1], c)
    # every task must hold a class; donate from the currently largest task
    while counts.min() == 0:
        counts[int(np.argmin(counts))] = 1
        largest = len(counts) - 1 - int(np.argmax(counts[::-1]))
        counts[largest] -= 1
    # remainder ties (flat stretches of the ratio curve) can land out of
    # order under float jitter; restore the documented head-to-tail shape
    counts[::-1].sort()
    return [int(n) for n in counts]


def build_stream(spec: StreamSpec) -> TaskStream:
    """Materialize the stream deterministically from the spec seed.

    Draw order is fixed (class order, task permutation, class means,
    per-class samples in class-id order) so the same seed yields identical
    data regardless of how tasks end up grouped.
    """
    c, t = spec.total_classes, spec.num_tasks
    counts = allocate_tasks(spec)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    class_order = rng.permutation(c)
    task_perm = rng.permutation(t)

    means = rng.normal(size=(c, FEATURE_DIM))
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    means = MEAN_RADIUS * means / norms
    samples = means[:, None, :] + NOISE_SCALE * rng.normal(
        size=(c, spec.samples_per_class, FEATURE_DIM))

    blocks = []
    start = 0
    for n in counts:
        blocks.append(np.sort(class_order[start:start + n]))
        start += n
    if spec.order is TaskOrder.PERMUTED_HEAD_TAIL:
        blocks = [blocks[i] for i in task_perm]

    n_train = max(1, int(round(TRAIN_FRACTION * spec.samples_per_class)))
    tasks = []
    for position, classes in enumerate(blocks, start=1):
        train_x, train_y, test_x, test_y = [], [], [], []
        for cid in classes:
            pts = samples[cid]
            train_x.append(pts[:n_train])
            test_x.append(pts[n_train:])
            train_y.append(np.full(n_train, cid, dtype=np.int64))
            test_y.append(np.full(spec.samples_per_class - n_train, cid, dtype=np.int64))
        data = SyntheticDataset(train_x=np.concatenate(train_x),
                                train_y=np.concatenate(train_y),
                                test_x=np.concatenate(test_x),
                                test_y=np.concatenate(test_y))
        meta = TaskMeta(task_id=position,
                        class_ids=frozenset(int(x) for x in classes),
                        sample_count=len(classes) * n_train)
        tasks.append(Task(meta=meta, data=data))
    return TaskStream(spec=spec, tasks=tuple(tasks))
