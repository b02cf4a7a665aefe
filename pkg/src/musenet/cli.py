"""Command-line orchestration for the whole pipeline.

Subcommands: gen-data, impute, train, eval, attention, bench-solver.
Each run resolves its configuration (defaults < --config document < flags),
writes its outputs plus a manifest carrying the config hash, seed, and
library versions, and exits 0 on success, 2 on configuration errors, 3 on
data errors, 4 on numerical failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from . import bench, linalg, metrics, mgp, synthgen, training
from .encoder import EncoderConfig, HeadsDontDivideWidth, ShapeMismatch
from .records import (RecordInvalid, read_imputed, read_records, write_imputed,
                      write_records)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_CONFIG_ERRORS = (synthgen.ConfigInvalid, synthgen.FractionSumInvalid,
                  HeadsDontDivideWidth, ShapeMismatch, KeyError, TypeError)
_DATA_ERRORS = (FileNotFoundError, RecordInvalid, json.JSONDecodeError,
                mgp.EmptyObservationSet, training.EmptyClass)
_NUMERICAL_ERRORS = (mgp.SolverBreakdown, mgp.DivergenceDetected,
                     mgp.DatasetImputationError, training.NonFiniteLoss,
                     linalg.NotPositiveDefinite, linalg.BreakdownZeroCurvature,
                     linalg.NonFinite, linalg.NonPositiveEigenvalue)


class CliError(Exception):
    def __init__(self, message, exit_code):
        super().__init__(message)
        self.exit_code = exit_code


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def resolve_config(defaults: dict, config_path, overrides: dict) -> dict:
    """defaults, then the --config document, then explicit flags."""
    merged = dict(defaults)
    if config_path:
        try:
            document = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise CliError(f"config file not found: {config_path}",
                           EXIT_CONFIG) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}",
                           EXIT_CONFIG) from exc
        unknown = set(document) - set(defaults)
        if unknown:
            raise CliError(
                f"unknown config fields: {', '.join(sorted(unknown))}",
                EXIT_CONFIG)
        merged.update(document)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def write_manifest(out_dir: Path, command: str, config: dict, seed):
    manifest = {"command": command, "config": config,
                "config_hash": config_hash(config), "seed": seed,
                "versions": {"python": sys.version.split()[0],
                             "numpy": np.__version__,
                             "scipy": scipy.__version__,
                             "musenet": "0.1.0"}}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return manifest


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- gen-data ----------------------------------------------------------------

GEN_DEFAULTS = {"n_obs": 200, "sub_time": 50, "n_variables": 10,
                "n_samples": 5000, "percent_negative": 0.90,
                "missing_rate_range": [0.30, 0.60], "seed": 0}


def cmd_gen_data(args) -> int:
    overrides = {"n_samples": args.n_samples, "seed": args.seed}
    config = resolve_config(GEN_DEFAULTS, args.config, overrides)
    try:
        ds_config = synthgen.DatasetConfig(
            n_obs=config["n_obs"], sub_time=config["sub_time"],
            n_variables=config["n_variables"], n_samples=config["n_samples"],
            percent_negative=config["percent_negative"],
            missing_rate_range=tuple(config["missing_rate_range"]),
            seed=config["seed"])
        ds_config.validate()
    except synthgen.ConfigInvalid as exc:
        raise CliError(f"invalid dataset configuration: {exc}",
                       EXIT_CONFIG) from exc
    dataset = synthgen.generate_dataset(ds_config)
    out = _out_dir(args)
    write_records(out / "records.ndjson", dataset.records)
    sidecar = {"config": ds_config.to_json_dict(), "seed": ds_config.seed,
               "config_hash": config_hash(config),
               "nonstationary_flags": dataset.nonstationary_flags,
               "n_records": len(dataset.records)}
    (out / "records.meta.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, "gen-data", config, ds_config.seed)
    print(f"wrote {len(dataset.records)} records to {out / 'records.ndjson'}")
    return EXIT_OK


# -- impute ------------------------------------------------------------------

IMPUTE_DEFAULTS = {"method": "mgp", "mask": True, "seed": 0, "jobs": 1,
                   "solver": "dense", "fit_iterations": 150,
                   "learning_rate": 0.05, "pool_size": 32, "rank": None,
                   "per_record_fit": False, "hyperparameters": None,
                   "input": None}


def cmd_impute(args) -> int:
    overrides = {"method": args.method, "seed": args.seed, "jobs": args.jobs,
                 "input": args.input, "mask": args.mask,
                 "hyperparameters": args.hyperparameters,
                 "solver": args.solver,
                 "fit_iterations": args.fit_iterations,
                 "per_record_fit": args.per_record_fit}
    config = resolve_config(IMPUTE_DEFAULTS, args.config, overrides)
    if config["method"] not in ("mgp", "gp", "mean"):
        raise CliError(f"unknown imputation method {config['method']!r}",
                       EXIT_CONFIG)
    if not config["input"]:
        raise CliError("impute requires --input", EXIT_CONFIG)
    records = read_records(config["input"])
    out = _out_dir(args)

    if config["method"] == "mean":
        means = mgp.variable_means(records)
        results = [mgp.mean_impute(r, means) for r in records]
        fitted = None
    else:
        diagonal = config["method"] == "gp"
        standardizer = mgp.Standardizer.fit(records)
        z_records = [standardizer.transform_record(r) for r in records]
        if config["hyperparameters"]:
            doc = json.loads(Path(config["hyperparameters"])
                             .read_text(encoding="utf-8"))
            fitted = mgp.MgpHyperparameters.from_json_dict(doc)
            results = _impute_with(records, fitted, config, standardizer)
        elif config["per_record_fit"]:
            fitted = None
            results = []
            for record, z_record in zip(records, z_records):
                hp0 = _initial_hp([record], diagonal, config)
                fit = mgp.fit_hyperparameters([z_record], hp0,
                                              _fit_config(config))
                results.extend(_impute_with([record], fit.hyperparameters,
                                            config, standardizer))
        else:
            hp0 = _initial_hp(records, diagonal, config)
            fit = mgp.fit_hyperparameters(z_records, hp0, _fit_config(config))
            fitted = fit.hyperparameters
            results = _impute_with(records, fitted, config, standardizer)

    if not config["mask"]:
        for res in results:
            res.mask = np.zeros_like(res.mask)
    write_imputed(out / "imputed.ndjson", results)
    if fitted is not None:
        (out / "theta.json").write_text(
            json.dumps(fitted.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    write_manifest(out, "impute", config, config["seed"])
    print(f"imputed {len(results)} records with {config['method']}")
    return EXIT_OK


def _initial_hp(records, diagonal, config):
    if not records:
        raise CliError("cannot fit on an empty dataset", EXIT_DATA)
    m = records[0].n_variables
    pooled_times = np.concatenate([r.times for r in records[:16]])
    rank = config["rank"] if not diagonal else m
    return mgp.default_hyperparameters(m, rank=rank, seed=config["seed"],
                                       times=pooled_times,
                                       diagonal_task=diagonal)


def _fit_config(config):
    return mgp.FitConfig(max_iterations=config["fit_iterations"],
                         learning_rate=config["learning_rate"],
                         method="dense", pool_size=config["pool_size"],
                         solver=mgp.SolverConfig(seed=config["seed"]))


def _impute_with(records, hp, config, standardizer=None):
    return mgp.impute_dataset(records, hp, parallelism=config["jobs"],
                              method=config["solver"],
                              solver_config=mgp.SolverConfig(seed=config["seed"]),
                              standardizer=standardizer)


# -- train ---------------------------------------------------------------

TRAIN_DEFAULTS = {"input": None, "validation": None, "n_heads": 2,
                  "n_blocks": 2, "feed_forward_width": 24, "n_branches": 10,
                  "dropout": 0.0, "epochs": 30, "batch_size": 64,
                  "learning_rate": 0.01, "weight_decay": 1e-4, "seed": 0,
                  "use_masks": True, "lr_decay_step": 0}

_METRIC_FNS = {
    "auroc": lambda s, l: metrics.auroc(list(zip(s, l))),
    "auprc": lambda s, l: metrics.auprc(list(zip(s, l))),
    "f1": lambda s, l: metrics.f1_recall(list(zip(s, l)))[0],
    "recall": lambda s, l: metrics.f1_recall(list(zip(s, l)))[1],
}


def cmd_train(args) -> int:
    overrides = {"input": args.input, "validation": args.validation,
                 "epochs": args.epochs, "seed": args.seed,
                 "n_branches": args.n_branches, "n_heads": args.n_heads,
                 "use_masks": args.use_masks}
    config = resolve_config(TRAIN_DEFAULTS, args.config, overrides)
    if not config["input"]:
        raise CliError("train requires --input", EXIT_CONFIG)
    results = read_imputed(config["input"])
    if not results:
        raise CliError("training set is empty", EXIT_DATA)
    validation = read_imputed(config["validation"]) \
        if config["validation"] else None

    enc_config = EncoderConfig(
        n_variables=results[0].imputed.shape[1], n_heads=config["n_heads"],
        n_blocks=config["n_blocks"],
        feed_forward_width=config["feed_forward_width"],
        n_branches=config["n_branches"], dropout=config["dropout"],
        seed=config["seed"])
    train_config = training.TrainConfig(
        epochs=config["epochs"], batch_size=config["batch_size"],
        learning_rate=config["learning_rate"],
        weight_decay=config["weight_decay"], seed=config["seed"],
        lr_decay_step=config["lr_decay_step"], use_masks=config["use_masks"])
    params, trace, normalizer = training.train(results, enc_config,
                                               train_config,
                                               validation=validation,
                                               metric_fns=_METRIC_FNS)
    out = _out_dir(args)
    training.save_checkpoint(out / "checkpoint", params,
                             seeds={"train": config["seed"],
                                    "init": enc_config.seed},
                             epoch=config["epochs"],
                             extra={"normalizer": normalizer.to_json_dict(),
                                    "use_masks": config["use_masks"]})
    chash = config_hash(config)
    lines = ["epoch,config_hash,seed,loss,auroc,auprc,f1,recall"]
    for row in trace:
        cells = [str(row.epoch), chash, str(config["seed"]), repr(row.loss)]
        for key in ("auroc", "auprc", "f1", "recall"):
            value = getattr(row, key)
            cells.append("" if value is None else repr(float(value)))
        lines.append(",".join(cells))
    (out / "trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(out, "train", config, config["seed"])
    print(f"trained {params.count()} parameters for {config['epochs']} epochs")
    return EXIT_OK


# -- eval / attention ------------------------------------------------------

EVAL_DEFAULTS = {"input": None, "checkpoint": None, "seed": 0,
                 "use_masks": None, "threshold": 0.5}


def _checkpoint_runtime(manifest, config):
    """Normalizer and mask policy recorded at training time."""
    extra = manifest.get("extra") or {}
    normalizer = training.Normalizer.from_json_dict(extra["normalizer"]) \
        if "normalizer" in extra else None
    use_masks = config["use_masks"]
    if use_masks is None:
        use_masks = extra.get("use_masks", True)
    return normalizer, use_masks


def cmd_eval(args) -> int:
    overrides = {"input": args.input, "checkpoint": args.checkpoint,
                 "seed": args.seed}
    config = resolve_config(EVAL_DEFAULTS, args.config, overrides)
    if not config["input"] or not config["checkpoint"]:
        raise CliError("eval requires --input and --checkpoint", EXIT_CONFIG)
    results = read_imputed(config["input"])
    params, manifest = training.load_checkpoint(config["checkpoint"])
    normalizer, use_masks = _checkpoint_runtime(manifest, config)
    scores, labels = training.score_dataset(params, results,
                                            use_masks=use_masks,
                                            normalizer=normalizer)
    items = list(zip(scores, labels))
    try:
        roc = metrics.auroc(items)
        prc = metrics.auprc(items)
    except (metrics.SingleClass, metrics.NoPositives) as exc:
        raise CliError(f"cannot evaluate: {exc}", EXIT_DATA) from exc
    f1, recall = metrics.f1_recall(items, threshold=config["threshold"])
    out = _out_dir(args)
    chash = config_hash(config)
    lines = ["config_hash,seed,n_records,auroc,auprc,f1,recall",
             f"{chash},{config['seed']},{len(results)},{roc!r},{prc!r},"
             f"{f1!r},{recall!r}"]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(out, "eval", config, config["seed"])
    print(f"auroc={roc:.4f} auprc={prc:.4f} f1={f1:.4f} recall={recall:.4f}")
    return EXIT_OK


def cmd_attention(args) -> int:
    overrides = {"input": args.input, "checkpoint": args.checkpoint,
                 "seed": args.seed}
    config = resolve_config(EVAL_DEFAULTS, args.config, overrides)
    if not config["input"] or not config["checkpoint"]:
        raise CliError("attention requires --input and --checkpoint",
                       EXIT_CONFIG)
    results = read_imputed(config["input"])
    params, manifest = training.load_checkpoint(config["checkpoint"])
    normalizer, use_masks = _checkpoint_runtime(manifest, config)
    mean_maps, col_sums = training.export_attention(
        params, results, use_masks=use_masks, normalizer=normalizer)
    out = _out_dir(args)
    (out / "attention_mean.csv").write_text(
        "\n".join(training.attention_csv_lines(mean_maps)) + "\n",
        encoding="utf-8")
    (out / "attention_colsum.csv").write_text(
        "\n".join(training.attention_colsum_csv_lines(col_sums)) + "\n",
        encoding="utf-8")
    write_manifest(out, "attention", config, config["seed"])
    print(f"exported {len(mean_maps)} averaged attention maps")
    return EXIT_OK


# -- bench-solver -----------------------------------------------------------

BENCH_DEFAULTS = {"sizes": [64, 128, 256], "repetitions": 3, "seed": 0}


def cmd_bench_solver(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    overrides = {"sizes": sizes, "repetitions": args.repetitions,
                 "seed": args.seed}
    config = resolve_config(BENCH_DEFAULTS, args.config, overrides)
    try:
        rows = bench.bench_solver(config["sizes"], config["repetitions"],
                                  seed=config["seed"])
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    out = _out_dir(args)
    lines = bench.bench_csv_lines(rows, config_hash(config))
    (out / "bench.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(out, "bench-solver", config, config["seed"])
    worst = max(row.solve_relative_error for row in rows)
    print(f"benchmarked sizes {config['sizes']}; worst solve error {worst:.2e}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="muse",
        description="Synthetic data generation, GP imputation, encoder "
                    "training, evaluation, and solver benchmarking.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=".", help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n-samples", type=int, default=None)

    p = sub.add_parser("impute", help="fill missing values")
    common(p)
    p.add_argument("--input", help="record file (NDJSON)")
    p.add_argument("--method", choices=["mgp", "gp", "mean"], default=None)
    p.add_argument("--mask", action=argparse.BooleanOptionalAction,
                   default=None, help="write true missingness masks")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--solver", choices=["dense", "mpcg"], default=None)
    p.add_argument("--hyperparameters", help="reuse a fitted theta JSON")
    p.add_argument("--fit-iterations", type=int, default=None)
    p.add_argument("--per-record-fit", action="store_true", default=None)

    p = sub.add_parser("train", help="train the classifier")
    common(p)
    p.add_argument("--input", help="imputed training file")
    p.add_argument("--validation", help="imputed validation file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-branches", type=int, default=None)
    p.add_argument("--n-heads", type=int, default=None)
    p.add_argument("--use-masks", action=argparse.BooleanOptionalAction,
                   default=None)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p)
    p.add_argument("--input", help="imputed test file")
    p.add_argument("--checkpoint", help="checkpoint stem (no extension)")

    p = sub.add_parser("attention", help="export attention maps")
    common(p)
    p.add_argument("--input", help="imputed dataset")
    p.add_argument("--checkpoint", help="checkpoint stem (no extension)")

    p = sub.add_parser("bench-solver", help="mPCG vs Cholesky benchmark")
    common(p)
    p.add_argument("--sizes", help="comma-separated kernel sizes")
    p.add_argument("--repetitions", type=int, default=None)

    return parser


_HANDLERS = {"gen-data": cmd_gen_data, "impute": cmd_impute,
             "train": cmd_train, "eval": cmd_eval,
             "attention": cmd_attention, "bench-solver": cmd_bench_solver}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
