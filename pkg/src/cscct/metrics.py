"""Accuracy matrix and the stability / plasticity summaries computed from it."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from cscct.data import ExampleSet


class MetricsError(ValueError):
    pass


def eval_accuracy(predict: Callable[[np.ndarray], np.ndarray], test: ExampleSet) -> float:
    """Fraction of ``test`` whose prediction equals the label."""
    if len(test) == 0:
        raise MetricsError("empty test set")
    pred = np.asarray(predict(test.features))
    return float(np.mean(pred == test.labels))


@dataclass
class AccuracyMatrix:
    """``acc[(t, k)]`` is the accuracy after phase ``t`` on the test set of task ``k`` (1-based, k <= t)."""

    num_tasks: int
    test_counts: dict[int, int] = field(default_factory=dict)
    acc: dict[tuple[int, int], float] = field(default_factory=dict)

    def set(self, t: int, k: int, value: float, test_count: int | None = None) -> None:
        if not 1 <= k <= t <= self.num_tasks:
            raise MetricsError(f"entry ({t}, {k}) is outside the lower triangle of a {self.num_tasks}-task matrix")
        if not 0.0 <= value <= 1.0:
            raise MetricsError(f"accuracy {value} outside [0, 1]")
        self.acc[(t, k)] = float(value)
        if test_count is not None:
            self.test_counts[k] = int(test_count)

    def get(self, t: int, k: int) -> float:
        try:
            return self.acc[(t, k)]
        except KeyError:
            raise MetricsError(f"missing accuracy entry ({t}, {k})") from None

    @classmethod
    def from_rows(cls, rows: list[list[float]], test_counts: list[int] | None = None) -> "AccuracyMatrix":
        """Build from ``rows[t-1] = [acc(t,1), ..., acc(t,t)]``."""
        m = cls(len(rows))
        for t, row in enumerate(rows, start=1):
            if len(row) != t:
                raise MetricsError(f"row {t} has {len(row)} entries, expected {t}")
            for k, v in enumerate(row, start=1):
                m.set(t, k, v)
        counts = test_counts or [1] * len(rows)
        m.test_counts = {k: int(n) for k, n in enumerate(counts, start=1)}
        return m

    def check_complete(self) -> None:
        for t in range(1, self.num_tasks + 1):
            for k in range(1, t + 1):
                self.get(t, k)

    def to_array(self) -> np.ndarray:
        out = np.full((self.num_tasks, self.num_tasks), np.nan)
        for (t, k), v in self.acc.items():
            out[t - 1, k - 1] = v
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "k", "accuracy", "test_count"])
        for (t, k) in sorted(self.acc):
            w.writerow([t, k, repr(self.acc[(t, k)]), self.test_counts.get(k, "")])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "AccuracyMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        m = cls(max(int(r["t"]) for r in rows))
        for r in rows:
            m.set(int(r["t"]), int(r["k"]), float(r["accuracy"]), int(r["test_count"]) if r["test_count"] else None)
        return m


def phase_accuracy(matrix: AccuracyMatrix, t: int) -> float:
    """Accuracy of phase ``t`` on the union of seen test sets, weighting tasks by test size."""
    counts = np.array([matrix.test_counts.get(k, 1) for k in range(1, t + 1)], dtype=np.float64)
    accs = np.array([matrix.get(t, k) for k in range(1, t + 1)])
    return float(np.dot(counts, accs) / counts.sum())


def average_incremental_accuracy(matrix: AccuracyMatrix) -> float:
    """Uniform mean over phases (the first included) of ``phase_accuracy``."""
    matrix.check_complete()
    return float(np.mean([phase_accuracy(matrix, t) for t in range(1, matrix.num_tasks + 1)]))


def apt(matrix: AccuracyMatrix) -> float:
    """Average accuracy on previous tasks: for each phase t >= 2 the mean over
    k < t of acc(t, k), averaged over those phases."""
    T = matrix.num_tasks
    if T < 2:
        raise MetricsError("APT needs at least two tasks")
    per_phase = [sum(matrix.get(t, k) for k in range(1, t)) / (t - 1) for t in range(2, T + 1)]
    return sum(per_phase) / (T - 1)


def act(matrix: AccuracyMatrix) -> float:
    """Average accuracy on the task just learned, over all phases."""
    T = matrix.num_tasks
    if T < 1:
        raise MetricsError("ACT needs at least one task")
    return sum(matrix.get(t, t) for t in range(1, T + 1)) / T


def export_embeddings(features_fn: Callable[[np.ndarray], np.ndarray], examples: ExampleSet, phase: int,
                      path) -> Path:
    """Write ``id,label,phase,f0..f{d-1}`` rows sorted by id."""
    if len(examples) == 0:
        raise MetricsError("no examples to export")
    order = np.argsort(examples.ids, kind="stable")
    feats = np.atleast_2d(features_fn(examples.features[order]))
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "phase"] + [f"f{j}" for j in range(feats.shape[1])])
        for row, i in enumerate(order):
            w.writerow([int(examples.ids[i]), int(examples.labels[i]), int(phase)] + [repr(float(v)) for v in feats[row]])
    return path


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_embeddings`: (ids, labels, phases, features)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2].astype(int), data[:, 3:]
