"""Labeled datasets, synthetic generators, CSV loading and incremental task streams."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DatasetError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    id: int
    features: np.ndarray
    label: int


@dataclass
class ExampleSet:
    """Column-oriented bundle of examples: ids, feature rows and labels."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {self.features.shape}")
        if not (len(self.ids) == len(self.features) == len(self.labels)):
            raise DatasetError("ids, features and labels disagree in length")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield LabeledExample(int(self.ids[i]), self.features[i], int(self.labels[i]))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask_or_index) -> "ExampleSet":
        return ExampleSet(self.ids[mask_or_index], self.features[mask_or_index], self.labels[mask_or_index])

    def of_class(self, label: int) -> "ExampleSet":
        return self.subset(self.labels == label)

    @classmethod
    def empty(cls, dim: int) -> "ExampleSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, dim)), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: Sequence["ExampleSet"]) -> "ExampleSet":
        return cls(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass
class LabeledDataset:
    train: ExampleSet
    test: ExampleSet
    num_classes: int
    label_map: dict = field(default_factory=dict)  # source label -> 0-based label

    def __post_init__(self):
        for part in (self.train, self.test):
            if len(part) and (part.labels.min() < 0 or part.labels.max() >= self.num_classes):
                raise DatasetError("label outside [0, num_classes)")
            if not np.all(np.isfinite(part.features)):
                raise DatasetError("non-finite feature value")
        if set(self.train.ids.tolist()) & set(self.test.ids.tolist()):
            raise DatasetError("train and test share example ids")


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    dim: int = 16
    per_class_train: int = 40
    per_class_test: int = 40
    class_mean_scale: float = 3.0
    within_class_std: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_classes", "dim", "per_class_train", "per_class_test"):
            if getattr(self, name) < 1:
                raise DatasetError(f"synthetic.{name} must be positive")
        if self.within_class_std < 0 or self.class_mean_scale < 0:
            raise DatasetError("synthetic scales must be non-negative")


def _uniform_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return direction * r


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Gaussian blobs around class means drawn uniformly in a ball.

    A zero ``within_class_std`` is allowed and yields copies of the class means.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = _uniform_ball(rng, spec.num_classes, spec.dim, spec.class_mean_scale)
    parts = {"train": [], "test": []}
    next_id = 0
    for split, count in (("train", spec.per_class_train), ("test", spec.per_class_test)):
        for c in range(spec.num_classes):
            x = means[c] + spec.within_class_std * rng.standard_normal((count, spec.dim))
            ids = np.arange(next_id, next_id + count)
            next_id += count
            parts[split].append(ExampleSet(ids, x, np.full(count, c)))
    return LabeledDataset(
        ExampleSet.concat(parts["train"]),
        ExampleSet.concat(parts["test"]),
        spec.num_classes,
        {c: c for c in range(spec.num_classes)},
    )


def load_csv_dataset(
    path,
    label_column: str,
    feature_columns: Sequence[str] | None = None,
    split_column: str | None = None,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> LabeledDataset:
    """Read a headered CSV into a dataset.

    Labels are remapped to ``0..n-1`` in sorted order of the source labels; the
    mapping is kept in ``label_map``. With ``split_column`` rows whose value is
    ``test`` go to the test split, otherwise a seeded per-class holdout of
    ``test_fraction`` is drawn. Ids follow file order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise DatasetError(f"{path}: no label column {label_column!r}")
        excluded = {label_column, split_column}
        cols = list(feature_columns) if feature_columns else [h for h in header if h not in excluded]
        missing = [c for c in cols if c not in header]
        if missing:
            raise DatasetError(f"{path}: missing feature columns {missing}")
        col_idx = [header.index(c) for c in cols]
        label_idx = header.index(label_column)
        split_idx = header.index(split_column) if split_column else None

        raw_labels, rows, is_test = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            values = []
            for name, j in [(label_column, label_idx)] + list(zip(cols, col_idx)):
                try:
                    v = float(row[j])
                except (ValueError, IndexError):
                    cell = row[j] if j < len(row) else ""
                    raise DatasetError(f"{path}: row {line_no}, column {name!r}: cannot parse {cell!r}") from None
                if not np.isfinite(v):
                    raise DatasetError(f"{path}: row {line_no}, column {name!r}: non-finite value")
                values.append(v)
            if values[0] != int(values[0]):
                raise DatasetError(f"{path}: row {line_no}: label {values[0]} is not an integer")
            raw_labels.append(int(values[0]))
            rows.append(values[1:])
            if split_idx is not None:
                is_test.append(row[split_idx].strip().lower() == "test")

    if not rows:
        raise DatasetError(f"{path}: no data rows")
    label_map = {src: i for i, src in enumerate(sorted(set(raw_labels)))}
    ids = np.arange(len(rows))
    x = np.array(rows, dtype=np.float64)
    y = np.array([label_map[v] for v in raw_labels])

    if split_idx is not None:
        test_mask = np.array(is_test)
    else:
        rng = np.random.default_rng(seed)
        test_mask = np.zeros(len(rows), dtype=bool)
        for c in range(len(label_map)):
            idx = np.flatnonzero(y == c)
            n_test = int(round(test_fraction * len(idx)))
            if n_test:
                test_mask[rng.choice(idx, size=n_test, replace=False)] = True
    whole = ExampleSet(ids, x, y)
    return LabeledDataset(whole.subset(~test_mask), whole.subset(test_mask), len(label_map), label_map)


@dataclass(frozen=True)
class StreamProtocol:
    first_task_classes: int
    per_task_classes: int
    variant: str = "equal"  # "equal" or "half_first"

    @classmethod
    def half_first(cls, total_classes: int, per_task_classes: int) -> "StreamProtocol":
        return cls(total_classes // 2, per_task_classes, "half_first")

    @classmethod
    def equal(cls, per_task_classes: int) -> "StreamProtocol":
        return cls(per_task_classes, per_task_classes, "equal")

    def validate(self, total_classes: int) -> None:
        b, c = self.first_task_classes, self.per_task_classes
        if b < 1 or c < 1:
            raise ProtocolError("class counts per task must be positive")
        if self.variant == "half_first":
            if 2 * b != total_classes:
                raise ProtocolError(f"half_first needs B = {total_classes}/2, got B={b}")
        elif self.variant == "equal":
            if b != c:
                raise ProtocolError(f"equal protocol needs B == C, got B={b}, C={c}")
        else:
            raise ProtocolError(f"unknown protocol variant {self.variant!r}")
        if total_classes < b:
            raise ProtocolError(f"{total_classes} classes cannot fill a first task of {b}")
        if (total_classes - b) % c:
            raise ProtocolError(f"{total_classes - b} remaining classes not divisible by {c}")

    def num_tasks(self, total_classes: int) -> int:
        self.validate(total_classes)
        return 1 + (total_classes - self.first_task_classes) // self.per_task_classes


@dataclass
class Task:
    """One step of the stream; labels are already in stream order (see ``TaskStream``)."""

    index: int
    class_set: tuple[int, ...]
    source_classes: tuple[int, ...]
    train: ExampleSet
    test: ExampleSet


@dataclass
class TaskStream:
    tasks: list[Task]
    class_order: list[int]  # class_order[i] = dataset label that became stream label i
    protocol: StreamProtocol

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    @property
    def label_remap(self) -> dict[int, int]:
        return {src: i for i, src in enumerate(self.class_order)}


def build_stream(dataset: LabeledDataset, protocol: StreamProtocol, class_order_seed: int) -> TaskStream:
    """Split the dataset's classes into disjoint tasks following ``protocol``.

    Classes are visited in a seeded uniform permutation and relabelled so that
    stream label ``i`` is the ``i``-th class to arrive.
    """
    n = dataset.num_classes
    protocol.validate(n)
    order = [int(c) for c in np.random.default_rng(class_order_seed).permutation(n)]
    remap = np.empty(n, dtype=np.int64)
    remap[order] = np.arange(n)

    def relabel(part: ExampleSet, mask) -> ExampleSet:
        sub = part.subset(mask)
        return ExampleSet(sub.ids, sub.features, remap[sub.labels])

    sizes = [protocol.first_task_classes] + [protocol.per_task_classes] * (protocol.num_tasks(n) - 1)
    tasks, start = [], 0
    for t, size in enumerate(sizes, start=1):
        new_labels = tuple(range(start, start + size))
        sources = tuple(order[start:start + size])
        tasks.append(Task(
            index=t,
            class_set=new_labels,
            source_classes=sources,
            train=relabel(dataset.train, np.isin(dataset.train.labels, sources)),
            test=relabel(dataset.test, np.isin(dataset.test.labels, sources)),
        ))
        start += size
    return TaskStream(tasks, order, protocol)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, part: ExampleSet) -> ExampleSet:
        return ExampleSet(part.ids, (part.features - self.mean) / self.std, part.labels)


def standardize_stream(stream: TaskStream) -> tuple[TaskStream, Standardizer]:
    """Standardize every task with statistics of the first task's training data only."""
    scaler = Standardizer.fit(stream.tasks[0].train.features)
    tasks = [
        Task(t.index, t.class_set, t.source_classes, scaler.apply(t.train), scaler.apply(t.test))
        for t in stream.tasks
    ]
    return TaskStream(tasks, stream.class_order, stream.protocol), scaler
