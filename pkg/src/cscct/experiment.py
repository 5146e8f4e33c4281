"""Per-seed runs, multi-seed experiments with on-disk artifacts, and run comparison."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cscct import checkpoint, seeding
from cscct.config import ExperimentConfig
from cscct.data import (
    ExampleSet,
    LabeledDataset,
    TaskStream,
    build_stream,
    generate_synthetic,
    load_csv_dataset,
    standardize_stream,
)
from cscct.learner import IncrementalLearner, PhaseTrace
from cscct.metrics import AccuracyMatrix, act, apt, average_incremental_accuracy, eval_accuracy, export_embeddings
from cscct.model import ModelConfig

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CSCCT_OUTPUT_ROOT"
METRICS = ("avg_inc_acc", "apt", "act")


class ExperimentError(RuntimeError):
    pass


def load_dataset(config: ExperimentConfig, seed: int) -> LabeledDataset:
    if config.csv is not None:
        src = config.csv
        return load_csv_dataset(src.path, src.label_column, src.feature_columns, src.split_column,
                                src.test_fraction, seed=int(seeding.stream(seed, "split").integers(2**31)))
    spec = dataclasses.replace(config.synthetic, seed=int(seeding.stream(seed, "data").integers(2**31)))
    return generate_synthetic(spec)


@dataclass
class SeedResult:
    seed: int
    matrix: AccuracyMatrix
    traces: list[PhaseTrace]
    learner: IncrementalLearner
    stream: TaskStream
    scaler: object
    failure: str | None = None

    def metrics(self) -> dict[str, float]:
        out = {"avg_inc_acc": average_incremental_accuracy(self.matrix), "act": act(self.matrix)}
        out["apt"] = apt(self.matrix) if self.matrix.num_tasks >= 2 else float("nan")
        return out


def run_seed(config: ExperimentConfig, seed: int, on_phase=None) -> SeedResult:
    """One full pass over the stream: train, snapshot, refill memory, evaluate every seen task.

    ``on_phase(t, learner, stream, scaler)`` is called after each phase's evaluation.
    """
    dataset = load_dataset(config, seed)
    raw_stream = build_stream(dataset, config.protocol, int(seeding.stream(seed, "class_order").integers(2**31)))
    stream, scaler = standardize_stream(raw_stream)
    model_cfg = ModelConfig(dataset.train.dim, tuple(config.model.hidden), config.model.feature_dim,
                            config.model.feature_relu)
    train_cfg = dataclasses.replace(config.train, weights=config.effective_weights)
    learner = IncrementalLearner(model_cfg, train_cfg, config.memory_per_class,
                                 seeding.stream(seed, "init"), seeding.stream(seed, "shuffle"))
    matrix = AccuracyMatrix(len(stream), {t.index: len(t.test) for t in stream})
    traces: list[PhaseTrace] = []
    for task in stream:
        learner.begin_task(task)
        traces.append(learner.train_phase(task))
        learner.end_task(task)
        for seen in stream.tasks[:task.index]:
            matrix.set(task.index, seen.index, eval_accuracy(learner.classify, seen.test))
        if on_phase is not None:
            on_phase(task.index, learner, stream, scaler)
    return SeedResult(seed, matrix, traces, learner, stream, scaler)


# ---------------------------------------------------------------------------
# runs with artifacts


def _seed_worker(args) -> dict:
    config, seed, out_dir = args
    return _run_seed_to_disk(config, seed, Path(out_dir))


def _run_seed_to_disk(config: ExperimentConfig, seed: int, out_dir: Path) -> dict:
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    record: dict = {"seed": seed}

    def write_phase(t, learner, stream, scaler):
        ck = seed_dir / f"checkpoint_phase{t}.ckpt"
        checkpoint.save(ck, checkpoint.Checkpoint.from_learner(learner, stream, t, config, scaler))
        files.append(str(ck.relative_to(out_dir)))
        if config.emit_embeddings:
            emb = seed_dir / f"embeddings_phase{t}.csv"
            export_embeddings(learner.model.features, ExampleSet.concat([s.test for s in stream.tasks[:t]]), t, emb)
            files.append(str(emb.relative_to(out_dir)))

    start = time.perf_counter()
    try:
        result = run_seed(config, seed, on_phase=write_phase)
    except Exception as err:  # noqa: BLE001 - recorded, partial outputs kept
        log.error("seed %d failed: %s", seed, err)
        record.update(failure=f"{type(err).__name__}: {err}", files=files)
        return record
    matrix_path = seed_dir / "accuracy_matrix.csv"
    result.matrix.save(matrix_path)
    trace_path = seed_dir / "loss_trace.csv"
    trace_path.write_text(_trace_csv(result.traces), encoding="utf-8", newline="\n")
    files += [str(matrix_path.relative_to(out_dir)), str(trace_path.relative_to(out_dir))]
    record.update(result.metrics())
    record.update(matrix=str(matrix_path.relative_to(out_dir)), files=sorted(files), failure=None,
                  wall_clock_s=time.perf_counter() - start)
    return record


def _trace_csv(traces: list[PhaseTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(traces[0].epoch_means)
    w.writerow(["phase", "epoch", *names])
    for tr in traces:
        for e in range(len(tr.epoch_means["total"])):
            w.writerow([tr.task_index, e, *(repr(tr.epoch_means[n][e]) for n in names)])
    return buf.getvalue()


def aggregate(per_seed: list[dict]) -> dict[str, dict[str, float]]:
    ok = [r for r in per_seed if not r.get("failure")]
    agg = {}
    for m in METRICS:
        vals = np.array([r[m] for r in ok], dtype=np.float64)
        agg[m] = {
            "mean": float(vals.mean()) if len(vals) else float("nan"),
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
            "n": int(len(vals)),
        }
    return agg


def default_output_dir(config: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{config.method.replace('+', '_')}-{config.hash()}"


def run_experiment(config: ExperimentConfig, out_dir=None, force: bool = False, parallel: int = 1) -> dict:
    """Run every seed, write artifacts under ``out_dir`` and return the summary dict."""
    out = Path(out_dir or config.output_dir or default_output_dir(config))
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ExperimentError(f"output directory {out} is not empty; pass --force to overwrite")
        import shutil

        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    jobs = [(config, s, str(out)) for s in config.seeds]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            per_seed = list(pool.map(_seed_worker, jobs))
    else:
        per_seed = [_seed_worker(j) for j in jobs]

    config_path = out / "config.json"
    config_path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary = {
        "format": "cscct-run-summary/1",
        "method": config.method,
        "config_hash": config.hash(),
        "protocol": dataclasses.asdict(config.protocol),
        "dataset": _dataset_tag(config),
        "per_seed": per_seed,
        "aggregate": aggregate(per_seed),
        "files": sorted(["config.json"] + [f for r in per_seed for f in r["files"]]),
        "failed_seeds": [r["seed"] for r in per_seed if r.get("failure")],
        "wall_clock_s": time.perf_counter() - start,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def _dataset_tag(config: ExperimentConfig) -> dict:
    if config.csv is not None:
        return {"csv": config.csv.path}
    spec = dataclasses.asdict(config.synthetic)
    spec.pop("seed")
    return {"synthetic": spec}


# ---------------------------------------------------------------------------
# comparison


def compare_runs(summaries: list[dict]) -> tuple[str, str]:
    """Table of mean ± std per metric, one row per run; ``*`` marks the best of each column.

    Ties keep the earliest run.
    """
    if len(summaries) < 2:
        raise ExperimentError("compare needs at least two summaries")
    ref = (summaries[0]["protocol"], summaries[0]["dataset"])
    for s in summaries[1:]:
        if (s["protocol"], s["dataset"]) != ref:
            raise ExperimentError(f"run {s['method']} ({s['config_hash']}) uses a different protocol or dataset")
    best = {}
    for m in METRICS:
        means = [s["aggregate"][m]["mean"] for s in summaries]
        best[m] = int(np.nanargmax(means)) if not all(np.isnan(means)) else -1

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "config_hash", *(f"{m}_{x}" for m in METRICS for x in ("mean", "std")), "best"])
    lines = [f"{'method':<18}" + "".join(f"{m:>22}" for m in METRICS)]
    for i, s in enumerate(summaries):
        agg = s["aggregate"]
        marks = [m for m in METRICS if best[m] == i]
        w.writerow([s["method"], s["config_hash"],
                    *(repr(agg[m][x]) for m in METRICS for x in ("mean", "std")), ";".join(marks)])
        cells = []
        for m in METRICS:
            cell = f"{100 * agg[m]['mean']:.2f} ± {100 * agg[m]['std']:.2f}" + ("*" if best[m] == i else " ")
            cells.append(f"{cell:>22}")
        lines.append(f"{s['method']:<18}" + "".join(cells))
    return "\n".join(lines) + "\n", buf.getvalue()


def load_summary(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    return json.loads(path.read_text(encoding="utf-8"))
