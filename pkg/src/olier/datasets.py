"""Deterministic synthetic sequential-task streams.

Two generators are provided.  ``rotated-gaussians`` places class means on a
circle inside a random two-dimensional plane of feature space and rotates the
circle a little further for every task, so later tasks overwrite earlier
decision regions unless something prevents it.  ``permuted-features`` fixes
one classification dataset and permutes its feature coordinates per task.
Everything is reproducible from (kind, task count, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

STREAM_KINDS = ("rotated-gaussians", "permuted-features")

DEFAULT_CLASSES = 4
DEFAULT_TRAIN_SIZE = 512
DEFAULT_TEST_SIZE = 256
DEFAULT_DIM = 32

# Class-mean circle radius and per-sample noise, before standardization.
_MEAN_RADIUS = 4.0
_NOISE_STD = 1.0
# Fraction of the inter-class angle the circle advances per task.  Tasks stay
# individually learnable while the full stream sweeps most of a class slot,
# which is what makes unconstrained sequential training forget.
_ROTATION_FRACTION = 0.18


@dataclass
class Task:
    """One supervised task: disjoint train/test splits plus its generator descriptor."""

    id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: int
    kind: str
    seed: int

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]


@dataclass
class TaskStream:
    """An ordered sequence of tasks; the order is the experiment."""

    tasks: list[Task]
    order_label: str = "order-1"
    kind: str = ""
    seed: int = 0

    def __len__(self) -> int:
        return len(self.tasks)

    def descriptor(self) -> dict:
        first = self.tasks[0]
        return {
            "kind": self.kind,
            "tasks": len(self.tasks),
            "seed": self.seed,
            "classes": first.classes,
            "dim": first.dim,
            "train_size": int(first.train_x.shape[0]),
            "test_size": int(first.test_x.shape[0]),
            "order_label": self.order_label,
            "task_ids": [t.id for t in self.tasks],
        }


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    """Labels with per-class counts balanced within +-1, in shuffled order."""
    reps = -(-n // classes)
    labels = np.tile(np.arange(classes), reps)[:n]
    rng.shuffle(labels)
    return labels.astype(np.int64)


def _standardize(train_x: np.ndarray, test_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pooled = np.concatenate([train_x, test_x], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std[std == 0.0] = 1.0
    return (train_x - mean) / std, (test_x - mean) / std


def _random_plane(rng: np.random.Generator, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """An orthonormal pair spanning a random 2-plane of feature space."""
    m = rng.normal(size=(dim, 2))
    q, _ = np.linalg.qr(m)
    return q[:, 0], q[:, 1]


def _gaussian_task(task_id: int, angle_offset: float, u: np.ndarray, v: np.ndarray,
                   classes: int, train_size: int, test_size: int, dim: int,
                   seed: int, kind: str) -> Task:
    rng = np.random.default_rng([seed, 201, task_id])
    angles = 2.0 * np.pi * np.arange(classes) / classes + angle_offset
    means = _MEAN_RADIUS * (np.cos(angles)[:, None] * u[None, :] + np.sin(angles)[:, None] * v[None, :])

    def sample(n: int) -> tuple[np.ndarray, np.ndarray]:
        y = _balanced_labels(n, classes, rng)
        x = means[y] + rng.normal(0.0, _NOISE_STD, size=(n, dim))
        return x, y

    train_x, train_y = sample(train_size)
    test_x, test_y = sample(test_size)
    train_x, test_x = _standardize(train_x, test_x)
    return Task(id=task_id, train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y,
                classes=classes, kind=kind, seed=seed)


def make_stream(kind: str, tasks: int, seed: int, classes: int = DEFAULT_CLASSES,
                train_size: int = DEFAULT_TRAIN_SIZE, test_size: int = DEFAULT_TEST_SIZE,
                dim: int = DEFAULT_DIM) -> TaskStream:
    """A T-task stream of the given kind, fully determined by the seed."""
    if tasks < 1:
        raise ConfigError(f"make_stream: need at least one task, got {tasks}")
    if kind not in STREAM_KINDS:
        raise ConfigError(f"make_stream: unknown stream kind {kind!r}; choose from {STREAM_KINDS}")

    if kind == "rotated-gaussians":
        plane_rng = np.random.default_rng([seed, 200])
        u, v = _random_plane(plane_rng, dim)
        step = _ROTATION_FRACTION * (2.0 * np.pi / classes)
        out = [
            _gaussian_task(t, t * step, u, v, classes, train_size, test_size, dim, seed, kind)
            for t in range(tasks)
        ]
        return TaskStream(tasks=out, kind=kind, seed=seed)

    # permuted-features: one base dataset, a feature permutation per task.
    plane_rng = np.random.default_rng([seed, 210])
    u, v = _random_plane(plane_rng, dim)
    base = _gaussian_task(0, 0.0, u, v, classes, train_size, test_size, dim, seed, kind)
    out = []
    for t in range(tasks):
        perm_rng = np.random.default_rng([seed, 211, t])
        perm = np.arange(dim) if t == 0 else perm_rng.permutation(dim)
        out.append(Task(id=t, train_x=base.train_x[:, perm].copy(), train_y=base.train_y.copy(),
                        test_x=base.test_x[:, perm].copy(), test_y=base.test_y.copy(),
                        classes=classes, kind=kind, seed=seed))
    return TaskStream(tasks=out, kind=kind, seed=seed)


def stream_orders(stream: TaskStream, permutations: list[list[int]]) -> list[TaskStream]:
    """Reordered copies of a stream sharing its task data, one per permutation."""
    t = len(stream.tasks)
    out = []
    for k, perm in enumerate(permutations):
        if sorted(perm) != list(range(t)):
            raise ConfigError(f"stream_orders: {perm} is not a permutation of 0..{t - 1}")
        out.append(TaskStream(tasks=[stream.tasks[i] for i in perm],
                              order_label=f"order-{k + 2}", kind=stream.kind, seed=stream.seed))
    return out
