"""Command line entry point: ``cscct run | compare | export-embeddings``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from cscct import checkpoint
from cscct.autodiff import ZeroVectorWarning
from cscct.config import ConfigError, load_config
from cscct.data import DatasetError, ExampleSet, load_csv_dataset
from cscct.experiment import (
    OUTPUT_ROOT_ENV,
    ExperimentError,
    compare_runs,
    default_output_dir,
    load_dataset,
    load_summary,
    run_experiment,
)
from cscct.losses import DegenerateBatchWarning
from cscct.metrics import export_embeddings

log = logging.getLogger("cscct")


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed_override is not None:
        config = dataclasses.replace(config, seeds=list(args.seed_override))
    if args.emit_embeddings:
        config = dataclasses.replace(config, emit_embeddings=True)
    out = Path(args.out or config.output_dir or default_output_dir(config))
    summary = run_experiment(config, out_dir=out, force=args.force, parallel=args.parallel)
    for m, agg in summary["aggregate"].items():
        print(f"{m:12s} {100 * agg['mean']:.2f} ± {100 * agg['std']:.2f}  (n={agg['n']})")
    print(f"config {summary['config_hash']} -> {out / 'summary.json'}")
    if summary["failed_seeds"]:
        log.error("failed seeds: %s", summary["failed_seeds"])
        return 1
    return 0


def _cmd_compare(args) -> int:
    text, table = compare_runs([load_summary(p) for p in args.summaries])
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(table, encoding="utf-8", newline="\n")
    return 0


def _examples_for_export(ck: checkpoint.Checkpoint, args) -> ExampleSet:
    path = Path(args.dataset)
    if path.suffix == ".toml":
        config = load_config(path)
        ds = load_dataset(config, args.seed if args.seed is not None else config.seeds[0])
        return ds.test if args.split == "test" else ds.train
    ds = load_csv_dataset(path, args.label_column, test_fraction=0.0)
    return ds.train


def _cmd_export(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    examples = _examples_for_export(ck, args)
    stream_label = {src: i for i, src in enumerate(ck.class_order)}
    if any(int(y) not in stream_label for y in examples.labels):
        raise DatasetError("dataset has classes the checkpoint's stream does not know")
    relabelled = ExampleSet(examples.ids, ck.standardize(examples.features),
                            np.array([stream_label[int(y)] for y in examples.labels], dtype=np.int64))
    out = Path(args.out or f"embeddings_phase{ck.phase}.csv")
    export_embeddings(ck.model().features, relabelled, ck.phase, out)
    print(f"wrote {len(relabelled)} rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cscct", description="Class-incremental learning experiments on tabular data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and show training warnings")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every seed of a config and write a run directory")
    run.add_argument("config", help="TOML experiment config")
    run.add_argument("--seed-override", type=int, nargs="+", metavar="SEED", help="replace the config's seed list")
    run.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs, plus method and hash)")
    run.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    run.add_argument("--parallel", type=int, default=1, metavar="N", help="seeds to run in parallel processes")
    run.add_argument("--emit-embeddings", action="store_true", help="dump test-set features after every phase")
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate two or more run summaries")
    cmp_.add_argument("summaries", nargs="+", help="summary.json files or run directories")
    cmp_.add_argument("--csv", help="also write the table as CSV")
    cmp_.set_defaults(func=_cmd_compare)

    exp = sub.add_parser("export-embeddings", help="write features of a dataset under a saved checkpoint")
    exp.add_argument("checkpoint")
    exp.add_argument("dataset", help="CSV file, or a TOML config whose dataset is regenerated")
    exp.add_argument("--label-column", default="label")
    exp.add_argument("--seed", type=int, help="seed for a TOML dataset (default: first config seed)")
    exp.add_argument("--split", choices=("train", "test"), default="test", help="split of a TOML dataset")
    exp.add_argument("--out", help="output CSV (default: embeddings_phase<t>.csv)")
    exp.set_defaults(func=_cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.verbose:
        # small batches routinely lack memory samples or hit dead relu features
        warnings.simplefilter("ignore", DegenerateBatchWarning)
        warnings.simplefilter("ignore", ZeroVectorWarning)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ExperimentError, DatasetError, checkpoint.CheckpointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
