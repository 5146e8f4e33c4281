"""Phase loop: train on the new task plus replayed exemplars, then snapshot and refill memory."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cscct import autodiff as ad
from cscct.autodiff import Tensor
from cscct.data import ExampleSet, Task
from cscct.losses import TERMS, BatchView, LossWeights, NonFiniteLossError, combined_loss
from cscct.memory import ExemplarMemory, class_means, l2_normalize, update_after_task
from cscct.model import SGD, Model, ModelConfig, expand_classifier, snapshot


class LearnerError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.05
    lr_decay_milestones: tuple[int, ...] = (30, 45)
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    classifier: str = "linear"  # "linear" or "nme"
    weights: LossWeights = field(default_factory=LossWeights)
    ct_detach_q: bool = False
    keep_step_log: bool = False

    def __post_init__(self):
        self.lr_decay_milestones = tuple(int(m) for m in self.lr_decay_milestones)
        if self.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("train.learning_rate must be > 0")
        ms = self.lr_decay_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 1 for m in ms):
            raise ValueError("train.lr_decay_milestones must be strictly increasing and inside (0, epochs)")
        if self.classifier not in ("linear", "nme"):
            raise ValueError(f"train.classifier must be 'linear' or 'nme', got {self.classifier!r}")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.lr_decay_milestones if epoch >= m)
        return self.learning_rate * self.lr_decay_factor**passed


@dataclass
class StepRecord:
    epoch: int
    batch_ids: np.ndarray
    terms: dict[str, float]
    total: float


@dataclass
class PhaseTrace:
    task_index: int
    epoch_means: dict[str, list[float]]
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return self.epoch_means["total"]


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class ModelPair:
    current: Model
    previous: Model | None = None


class IncrementalLearner:
    """Owns the model pair and the exemplar memory across the phases of one stream.

    Typical use per task: ``begin_task`` (grow the classifier), ``train_phase``,
    ``end_task`` (snapshot the teacher and add exemplars).
    """

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, memory_budget: int,
                 init_rng: np.random.Generator, shuffle_rng: np.random.Generator):
        self.train_config = train_config
        self.pair = ModelPair(Model(model_config, init_rng))
        self.memory = ExemplarMemory(memory_budget)
        self._init_rng = init_rng
        self._shuffle_rng = shuffle_rng
        self.tasks_seen = 0

    @property
    def model(self) -> Model:
        return self.pair.current

    def begin_task(self, task: Task) -> None:
        n_seen = self.model.num_classes
        if min(task.class_set) != n_seen or max(task.class_set) != n_seen + len(task.class_set) - 1:
            raise LearnerError(f"task {task.index} classes {task.class_set} do not follow the {n_seen} seen classes")
        expand_classifier(self.model, len(task.class_set), self._init_rng)

    def training_set(self, task: Task) -> ExampleSet:
        replay = self.memory.as_example_set(task.train.dim)
        return ExampleSet.concat([task.train, replay]) if len(replay) else task.train

    def train_phase(self, task: Task) -> PhaseTrace:
        return train_phase(self.pair, task, self.memory, self.train_config, self._shuffle_rng)

    def end_task(self, task: Task) -> None:
        self.memory = update_after_task(self.memory, task, self.model.features)
        self.pair.previous = snapshot(self.model)
        self.tasks_seen += 1

    def classify(self, x: np.ndarray, mode: str | None = None) -> np.ndarray:
        return classify(self.model, self.memory, x, mode or self.train_config.classifier)


def train_phase(pair: ModelPair, task: Task, memory: ExemplarMemory, config: TrainConfig,
                rng: np.random.Generator) -> PhaseTrace:
    """SGD over shuffled ``task.train ∪ memory`` for ``config.epochs`` epochs.

    The previous model, when present, supplies teacher features and logits; the
    first task trains on cross-entropy alone.
    """
    model, teacher = pair.current, pair.previous
    if model.num_classes != max(task.class_set) + 1:
        raise LearnerError("classifier must be expanded for the task before training")
    if (teacher is None) != (task.index == 1):
        raise LearnerError("a previous model is required exactly for tasks after the first")
    if teacher is not None and not teacher.frozen:
        raise LearnerError("previous model must be a frozen snapshot")

    replay = memory.as_example_set(task.train.dim)
    data = ExampleSet.concat([task.train, replay]) if len(replay) else task.train
    is_new = np.isin(data.labels, task.class_set)
    phase = "first_task" if teacher is None else "incremental"

    opt = SGD(model.parameters(), config.learning_rate, config.momentum, config.weight_decay)
    means: dict[str, list[float]] = {name: [] for name in (*TERMS, "total")}
    steps: list[StepRecord] = []
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        sums = dict.fromkeys(means, 0.0)
        batches = epoch_batches(rng, len(data), config.batch_size)
        for idx in batches:
            x = Tensor(data.features[idx])
            feats = model.features_tensor(x)
            logits = model.logits_tensor(feats)
            prev_feats = prev_logits = None
            if teacher is not None:
                prev_feats = teacher.features_tensor(x)
                prev_logits = teacher.logits_tensor(prev_feats)
            batch = BatchView(data.labels[idx], feats, prev_feats, is_new[idx])
            out = combined_loss(batch, logits, prev_logits, config.weights, phase, config.ct_detach_q)
            total = out.total.item()
            if not np.isfinite(total):
                raise NonFiniteLossError("total")
            opt.zero_grad()
            ad.backward(out.total)
            opt.step()
            for name in TERMS:
                sums[name] += out.terms[name]
            sums["total"] += total
            if config.keep_step_log:
                steps.append(StepRecord(epoch, data.ids[idx].copy(), dict(out.terms), total))
        for name in means:
            means[name].append(sums[name] / len(batches))
    return PhaseTrace(task.index, means, steps)


def classify(model: Model, memory: ExemplarMemory | None, x: np.ndarray, mode: str = "linear") -> np.ndarray:
    """Predicted class per row of ``x``; ties go to the smaller class index."""
    x = np.atleast_2d(x)
    if mode == "linear":
        return np.argmax(model.logits(x), axis=1)
    if mode != "nme":
        raise ValueError(f"unknown classifier mode {mode!r}")
    if memory is None or not memory.store:
        raise LearnerError("nearest-mean classification needs a non-empty memory")
    missing = sorted(set(range(model.num_classes)) - set(memory.store))
    if missing:
        raise LearnerError(f"classes {missing} have no exemplars")
    means = class_means(memory, model.features)
    centers = np.stack([means[c] for c in range(model.num_classes)])
    f = l2_normalize(model.features(x))
    dist = np.linalg.norm(f[:, None, :] - centers[None, :, :], axis=2)
    return np.argmin(dist, axis=1)
