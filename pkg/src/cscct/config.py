"""Experiment configuration: TOML file -> validated dataclasses, plus a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from cscct.data import StreamProtocol, SyntheticSpec
from cscct.learner import TrainConfig
from cscct.losses import LossWeights

PRESETS = ("finetune_replay", "base_kd", "base_kd+csc", "base_kd+ct", "base_kd+cscct")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


@dataclass
class CsvSource:
    path: str
    label_column: str
    feature_columns: list[str] | None = None
    split_column: str | None = None
    test_fraction: float = 0.2


@dataclass
class ModelSection:
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    feature_relu: bool = True


@dataclass
class ExperimentConfig:
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    csv: CsvSource | None = None
    protocol: StreamProtocol = field(default_factory=lambda: StreamProtocol.equal(2))
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    memory_per_class: int = 20
    method: str = "base_kd+cscct"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str | None = None
    emit_embeddings: bool = False

    def __post_init__(self):
        if self.method not in PRESETS:
            raise ConfigError(f"method: unknown preset {self.method!r}; choose from {', '.join(PRESETS)}")
        if (self.synthetic is None) == (self.csv is None):
            raise ConfigError("dataset: give exactly one of [dataset.synthetic] or [dataset.csv]")
        if self.memory_per_class < 1:
            raise ConfigError("memory.per_class: must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")

    @property
    def effective_weights(self) -> LossWeights:
        """Loss weights after the preset has switched terms off."""
        w = self.train.weights
        if self.method == "finetune_replay":
            return dataclasses.replace(w, alpha=0.0, beta=0.0, base_kd_weight=0.0)
        if self.method == "base_kd":
            return dataclasses.replace(w, alpha=0.0, beta=0.0)
        if self.method == "base_kd+csc":
            return dataclasses.replace(w, beta=0.0)
        if self.method == "base_kd+ct":
            return dataclasses.replace(w, alpha=0.0)
        return w

    def with_method(self, method: str, **weights) -> "ExperimentConfig":
        train = dataclasses.replace(self.train, weights=dataclasses.replace(self.train.weights, **weights))
        return dataclasses.replace(self, method=method, train=train)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def semantic_dict(self) -> dict[str, Any]:
        """Fields that change results; output location and export flags are excluded."""
        d = self.to_dict()
        for key in ("output_dir", "emit_embeddings"):
            d.pop(key)
        d["train"]["weights"] = _plain(dataclasses.asdict(self.effective_weights))
        d["train"].pop("keep_step_log")
        if d["synthetic"] is not None:
            d["synthetic"].pop("seed")  # replaced by a per-run seed
        return d

    def hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _take(section: dict, cls, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}: unknown field")
    try:
        return cls(**section)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{name}: {err}") from None


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    dataset = dict(raw.pop("dataset", {}))
    synthetic = csv_src = None
    if "csv" in dataset:
        csv_src = _take(dataset.pop("csv"), CsvSource, "dataset.csv")
    if "synthetic" in dataset or csv_src is None:
        syn_raw = dataset.pop("synthetic", {})
        if "seed" in syn_raw:
            raise ConfigError("dataset.synthetic.seed: data seeds are derived from experiment.seeds")
        synthetic = _take(syn_raw, SyntheticSpec, "dataset.synthetic")
        try:
            synthetic.validate()
        except ValueError as err:
            raise ConfigError(f"dataset.synthetic: {err}") from None
    if dataset:
        raise ConfigError(f"dataset.{sorted(dataset)[0]}: unknown field")

    proto = dict(raw.pop("protocol", {}))
    variant = proto.pop("variant", "equal")
    per_task = proto.pop("per_task_classes", 2)
    first = proto.pop("first_task_classes", None)
    if proto:
        raise ConfigError(f"protocol.{sorted(proto)[0]}: unknown field")
    if variant not in ("equal", "half_first"):
        raise ConfigError(f"protocol.variant: must be 'equal' or 'half_first', got {variant!r}")
    if first is None:
        total = synthetic.num_classes if synthetic else None
        if variant == "equal":
            first = per_task
        elif total is None:
            raise ConfigError("protocol.first_task_classes: required for half_first with a CSV dataset")
        else:
            first = total // 2
    protocol = StreamProtocol(int(first), int(per_task), variant)
    if synthetic is not None:
        try:
            protocol.validate(synthetic.num_classes)
        except ValueError as err:
            raise ConfigError(f"protocol: {err}") from None

    model_raw = dict(raw.pop("model", {}))
    if "hidden" in model_raw:
        model_raw["hidden"] = tuple(model_raw["hidden"])
    model = _take(model_raw, ModelSection, "model")

    train_raw = dict(raw.pop("train", {}))
    weights = _take(dict(raw.pop("loss", {})), LossWeights, "loss")
    train = _take({**train_raw, "weights": weights}, TrainConfig, "train")

    memory = dict(raw.pop("memory", {}))
    per_class = memory.pop("per_class", 20)
    if memory:
        raise ConfigError(f"memory.{sorted(memory)[0]}: unknown field")

    experiment = dict(raw.pop("experiment", {}))
    method = experiment.pop("method", "base_kd+cscct")
    seeds = experiment.pop("seeds", [0])
    output_dir = experiment.pop("output_dir", None)
    emit = experiment.pop("emit_embeddings", False)
    if experiment:
        raise ConfigError(f"experiment.{sorted(experiment)[0]}: unknown field")
    if raw:
        raise ConfigError(f"{sorted(raw)[0]}: unknown section")
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("experiment.seeds: must be a list of integers")
    return ExperimentConfig(synthetic, csv_src, protocol, model, train, int(per_class), method, seeds,
                            output_dir, bool(emit))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return from_dict(raw)
