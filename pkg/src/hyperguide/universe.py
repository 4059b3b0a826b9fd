"""Synthetic task universe: rotated Gaussian-cluster classification tasks.

Each task places ``C`` isotropic clusters on a circle of radius ``r`` at
angles ``alpha + 2*pi*c/C``; a label-permutation pattern ``k`` decides which
class each cluster carries. A task's descriptor is a fixed random projection
of ``[cos alpha, sin alpha, r, onehot(k)]``, normalised to unit length, and
plays the part of a frozen language embedding.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class UniverseConfig:
    seed: int = 0
    n_classes: int = 4
    n_patterns: int = 8
    d_embed: int = 16
    sigma_range: tuple = (0.15, 0.45)
    radius_range: tuple = (0.5, 2.0)
    # None -> one cluster spacing, 2*pi/C (see README: full-circle rotations
    # make every unconditional classifier exactly chance-level)
    alpha_max: float | None = None
    n_train: int = 64
    n_test: int = 16
    descriptor_noise: float = 0.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.sigma_range[0] <= self.sigma_range[1]:
            raise ValueError("invalid sigma range")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ValueError("invalid radius range")
        if self.n_patterns < 1 or self.d_embed < 1:
            raise ValueError("n_patterns and d_embed must be positive")
        if self.n_patterns > math.factorial(self.n_classes):
            raise ValueError("more patterns requested than label permutations exist")
        if self.alpha_max is not None and not 0 < self.alpha_max <= 2 * math.pi:
            raise ValueError("alpha_max must lie in (0, 2*pi]")

    @property
    def alpha_hi(self) -> float:
        return 2 * math.pi / self.n_classes if self.alpha_max is None else float(self.alpha_max)

    @property
    def train_indices(self) -> list[int]:
        return list(range(self.n_train))

    @property
    def test_indices(self) -> list[int]:
        return list(range(self.n_train, self.n_train + self.n_test))


@dataclass(frozen=True)
class TaskParams:
    alpha: float
    radius: float
    pattern: int
    sigma: float


@dataclass(frozen=True)
class TaskSpec:
    id: int
    params: TaskParams
    descriptor: np.ndarray = field(compare=False, repr=False)
    data_seed: int
    n_classes: int


@dataclass(frozen=True)
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("inputs must be finite")

    def __len__(self):
        return self.y.shape[0]


@lru_cache(maxsize=None)
def pattern_table(n_classes: int = 4, n_patterns: int = 8) -> np.ndarray:
    """Label-assignment table, row k maps cluster index -> class label.

    Permutations are ordered by number of fixed points (most first), then
    lexicographically. For C=4, P=8 this is the identity, the six
    transpositions and the 3-cycle (0 1 2)->(1 2 0)::

        [0 1 2 3] [1 0 2 3] [2 1 0 3] [3 1 2 0]
        [0 2 1 3] [0 3 2 1] [0 1 3 2] [1 2 0 3]
    """
    perms = list(itertools.permutations(range(n_classes)))
    perms.sort(key=lambda p: -sum(i == v for i, v in enumerate(p)))
    table = np.array(perms[:n_patterns], dtype=np.int64)
    table.setflags(write=False)
    return table


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


_DESCRIPTOR_STREAM = 0x0DE5C
_TASK_STREAM = 0x7A5C
_MASK_STREAM = 0x3A5C


@lru_cache(maxsize=64)
def _projection(seed: int, d_embed: int, n_features: int) -> np.ndarray:
    m = _rng(seed, _DESCRIPTOR_STREAM).standard_normal((d_embed, n_features))
    m.setflags(write=False)
    return m


def descriptor_features(params: TaskParams, n_patterns: int) -> np.ndarray:
    onehot = np.zeros(n_patterns)
    onehot[params.pattern] = 1.0
    return np.concatenate([[math.cos(params.alpha), math.sin(params.alpha), params.radius], onehot])


def encode_descriptor(params: TaskParams, cfg: UniverseConfig) -> np.ndarray:
    """Unit-norm task embedding; depends only on ``params`` and the universe config."""
    feats = descriptor_features(params, cfg.n_patterns)
    v = _projection(cfg.seed, cfg.d_embed, feats.size) @ feats
    if cfg.descriptor_noise > 0:
        digest = hashlib.sha256(np.asarray(feats, dtype=np.float64).tobytes()).digest()
        noise_rng = _rng(cfg.seed, int.from_bytes(digest[:8], "little"))
        v = v + cfg.descriptor_noise * noise_rng.standard_normal(v.shape)
    return v / np.linalg.norm(v)


def sample_task(cfg: UniverseConfig, task_index: int) -> TaskSpec:
    if task_index < 0:
        raise ValueError("task_index must be non-negative")
    rng = _rng(cfg.seed, _TASK_STREAM, task_index)
    params = TaskParams(
        alpha=float(rng.uniform(0.0, cfg.alpha_hi)),
        radius=float(rng.uniform(*cfg.radius_range)),
        pattern=int(rng.integers(cfg.n_patterns)),
        sigma=float(rng.uniform(*cfg.sigma_range)),
    )
    data_seed = int(rng.integers(2**31 - 1))
    return TaskSpec(task_index, params, encode_descriptor(params, cfg), data_seed, cfg.n_classes)


def task_list(cfg: UniverseConfig, indices) -> list[TaskSpec]:
    return [sample_task(cfg, i) for i in indices]


def cluster_centers(task: TaskSpec) -> np.ndarray:
    p = task.params
    ang = p.alpha + 2 * math.pi * np.arange(task.n_classes) / task.n_classes
    return p.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def cluster_labels(task: TaskSpec, n_patterns: int | None = None) -> np.ndarray:
    table = pattern_table(task.n_classes, max(n_patterns or 0, task.params.pattern + 1))
    return table[task.params.pattern]


def _draw(task: TaskSpec, n: int, rng: np.random.Generator) -> LabeledSet:
    clusters = rng.integers(task.n_classes, size=n)
    noise = rng.standard_normal((n, 2)) * task.params.sigma
    x = cluster_centers(task)[clusters] + noise
    return LabeledSet(x, cluster_labels(task)[clusters])


def realize_split(task: TaskSpec, n_support: int, n_query: int, draw_seed: int):
    """Draw disjoint support and query sets; deterministic in all arguments."""
    if n_support < 0 or n_query < 1:
        raise ValueError("need n_support >= 0 and n_query >= 1")
    data = _draw(task, n_support + n_query, _rng(task.data_seed, draw_seed))
    support = LabeledSet(data.x[:n_support], data.y[:n_support])
    query = LabeledSet(data.x[n_support:], data.y[n_support:])
    return support, query


def bayes_accuracy(task: TaskSpec, n_mc: int = 20000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo accuracy of the Bayes classifier and its standard error.

    Clusters share one isotropic covariance and equal priors, and labels are a
    permutation of clusters, so the Bayes rule is the nearest cluster center.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    rng = _rng(task.data_seed, seed, 0xBA7E5)
    clusters = rng.integers(task.n_classes, size=n_mc)
    centers = cluster_centers(task)
    x = centers[clusters] + rng.standard_normal((n_mc, 2)) * task.params.sigma
    d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    labels = cluster_labels(task)
    acc = float(np.mean(labels[d2.argmin(1)] == labels[clusters]))
    return acc, math.sqrt(max(acc * (1 - acc), 1e-300) / n_mc)


def descriptor_mask(cfg: UniverseConfig, fraction: float, indices) -> np.ndarray:
    """Boolean availability per task; nested across fractions for one universe seed."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    u = _rng(cfg.seed, _MASK_STREAM).random(max(indices) + 1 if len(indices) else 0)
    return np.array([u[i] < fraction for i in indices], dtype=bool)


def export_task_csv(task: TaskSpec, path, n_support: int, n_query: int, draw_seed: int) -> Path:
    support, query = realize_split(task, n_support, n_query, draw_seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "y", "split"])
        for name, part in (("support", support), ("query", query)):
            for (x1, x2), y in zip(part.x, part.y):
                w.writerow([repr(float(x1)), repr(float(x2)), int(y), name])
    return path
