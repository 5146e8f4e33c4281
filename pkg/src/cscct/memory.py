"""Per-class exemplar memory filled by herding selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from cscct.data import ExampleSet, Task

FeatureFn = Callable[[np.ndarray], np.ndarray]

# distances closer than this count as a tie (resolved by smallest id)
HERDING_TIE_TOL = 1e-12


class ExemplarMemoryError(ValueError):
    pass


class DegenerateMeanError(ExemplarMemoryError):
    """A class mean of normalized features has (near) zero length."""


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)


def herding_select(class_examples: Iterable[tuple[int, np.ndarray]], budget: int) -> list[int]:
    """Greedy herding over L2-normalized features.

    Step ``j`` adds the unpicked example that brings the running mean of the
    picked features closest to the class mean. Candidates are ranked by id, so
    equal distances go to the smallest id whatever the input order.
    """
    if budget < 1:
        raise ExemplarMemoryError(f"budget must be >= 1, got {budget}")
    pairs = sorted(((int(i), np.asarray(f, dtype=np.float64)) for i, f in class_examples), key=lambda p: p[0])
    if not pairs:
        raise ExemplarMemoryError("herding_select needs at least one example")
    ids = np.array([p[0] for p in pairs])
    if len(set(ids.tolist())) != len(ids):
        raise ExemplarMemoryError("duplicate example ids")
    feats = l2_normalize(np.stack([p[1] for p in pairs]))
    target = feats.mean(axis=0)

    available = np.ones(len(ids), dtype=bool)
    running = np.zeros_like(target)
    picked: list[int] = []
    for j in range(1, min(budget, len(ids)) + 1):
        dist = np.linalg.norm(target - (running + feats) / j, axis=1)
        dist[~available] = np.inf
        best = int(np.flatnonzero(dist <= dist.min() + HERDING_TIE_TOL)[0])
        picked.append(int(ids[best]))
        available[best] = False
        running = running + feats[best]
    return picked


@dataclass
class ExemplarMemory:
    """Fixed per-class budget; ``store`` keeps ids in herding order."""

    per_class_budget: int
    store: dict[int, list[int]] = field(default_factory=dict)
    feature_cache: dict[int, np.ndarray] = field(default_factory=dict)
    inputs: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def classes(self) -> list[int]:
        return sorted(self.store)

    def __len__(self) -> int:
        return sum(len(v) for v in self.store.values())

    def as_example_set(self, dim: int) -> ExampleSet:
        """Stored exemplars as one example set, classes ascending, herding order within."""
        ids, xs, ys = [], [], []
        for c in self.classes:
            for i in self.store[c]:
                ids.append(i)
                xs.append(self.inputs[i])
                ys.append(c)
        if not ids:
            return ExampleSet.empty(dim)
        return ExampleSet(np.array(ids), np.stack(xs), np.array(ys))

    def fingerprint(self) -> tuple:
        return tuple((c, tuple(self.store[c])) for c in self.classes)


def update_after_task(memory: ExemplarMemory, task: Task, feature_fn: FeatureFn) -> ExemplarMemory:
    """Add herding-selected exemplars for each class of ``task``; old classes stay as they are."""
    clash = set(task.class_set) & set(memory.store)
    if clash:
        raise ExemplarMemoryError(f"classes {sorted(clash)} are already in memory")
    store = {c: list(v) for c, v in memory.store.items()}
    cache = dict(memory.feature_cache)
    inputs = dict(memory.inputs)
    for c in task.class_set:
        part = task.train.of_class(c)
        if not len(part):
            continue
        feats = np.asarray(feature_fn(part.features), dtype=np.float64)
        chosen = herding_select(zip(part.ids.tolist(), feats), memory.per_class_budget)
        store[c] = chosen
        row_of = {int(i): r for r, i in enumerate(part.ids)}
        for i in chosen:
            cache[i] = feats[row_of[i]]
            inputs[i] = part.features[row_of[i]]
    return ExemplarMemory(memory.per_class_budget, store, cache, inputs)


def class_means(memory: ExemplarMemory, feature_fn: FeatureFn, eps: float = 1e-12) -> dict[int, np.ndarray]:
    """Normalized mean of normalized current-model features of each class's exemplars."""
    if not memory.store:
        raise ExemplarMemoryError("class_means on an empty memory")
    means = {}
    for c in memory.classes:
        x = np.stack([memory.inputs[i] for i in memory.store[c]])
        mu = l2_normalize(np.asarray(feature_fn(x), dtype=np.float64)).mean(axis=0)
        norm = np.linalg.norm(mu)
        if norm <= eps:
            raise DegenerateMeanError(f"class {c}: exemplar feature mean is the zero vector")
        means[c] = mu / norm
    return means
