"""Command-line entry point: dataset generation, training sweeps, comparisons.

    unismmc gen --spec spec.json --out data.umds
    unismmc train --config experiment.json --out runs/ [--parallel N]
    unismmc consistency runs/unis_mmc-seed0 runs/mt_mml-seed0 ...

Config files are JSON with full schema validation; every run directory
receives the original config verbatim plus a fully resolved run.json, so
runs are reproducible from their own artifacts.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys

import numpy as np

from . import synthgen, trainer
from .container import atomic_write_text
from .errors import (
    ConfigurationError,
    DataError,
    DegenerateInputError,
    FormatError,
    ShapeError,
    TrainingDiverged,
)
from .model import init_model, make_model_spec, save_model

_MODEL_KEYS = {"representation_dim", "encoder_hidden", "classifier_hidden"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(trainer.TrainConfig)} - {"method", "seed"}
_METHOD_ENTRY_KEYS = {"name", "method"} | _TRAIN_KEYS
_EXPERIMENT_KEYS = {"dataset", "synth", "model", "train", "methods", "seeds"}


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc


def _reject_unknown(mapping, allowed, where):
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def _normalize_methods(raw):
    if not isinstance(raw, list) or not raw:
        raise ConfigurationError("config: 'methods' must be a non-empty list")
    entries = []
    for item in raw:
        if isinstance(item, str):
            entry = {"name": item, "method": item}
        elif isinstance(item, dict):
            _reject_unknown(item, _METHOD_ENTRY_KEYS, "methods entry")
            if "method" not in item:
                raise ConfigurationError(f"methods entry {item}: missing 'method'")
            entry = dict(item)
            entry.setdefault("name", entry["method"])
        else:
            raise ConfigurationError(f"methods entry {item!r} must be a string or an object")
        entries.append(entry)
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"method names must be unique, got {names}")
    return entries


def _parse_experiment(doc, config_dir):
    if not isinstance(doc, dict):
        raise ConfigurationError("config: top level must be a JSON object")
    _reject_unknown(doc, _EXPERIMENT_KEYS, "config")
    if "dataset" not in doc:
        raise ConfigurationError("config: missing 'dataset' path (run `unismmc gen` first)")
    dataset_path = doc["dataset"]
    if not os.path.isabs(dataset_path):
        dataset_path = os.path.normpath(os.path.join(config_dir, dataset_path))

    model_cfg = {"representation_dim": 32, "encoder_hidden": [64, 64], "classifier_hidden": [64, 64]}
    if "model" in doc:
        _reject_unknown(doc["model"], _MODEL_KEYS, "config.model")
        model_cfg.update(doc["model"])

    train_cfg = dict(doc.get("train", {}))
    _reject_unknown(train_cfg, _TRAIN_KEYS, "config.train")

    methods = _normalize_methods(doc.get("methods", []))
    seeds = doc.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigurationError("config: 'seeds' must be a non-empty list of integers")

    synth_spec = None
    if "synth" in doc:
        synth_spec = synthgen.spec_from_dict(doc["synth"])
    return {
        "dataset": dataset_path,
        "synth": synth_spec,
        "model": model_cfg,
        "train": train_cfg,
        "methods": methods,
        "seeds": seeds,
    }


def _train_config(base_train, entry, seed):
    merged = dict(base_train)
    merged.update({k: v for k, v in entry.items() if k in _TRAIN_KEYS})
    return trainer.TrainConfig(method=entry["method"], seed=seed, **merged)


def _execute_run(job):
    """One (method, seed) run; self-contained so it can run in a worker process."""
    dataset = synthgen.load(job["dataset"])
    config = trainer.TrainConfig(**job["train_config"])
    spec = make_model_spec(
        input_dims=dataset.spec.feature_dims,
        num_classes=dataset.spec.num_classes,
        representation_dim=job["model_config"]["representation_dim"],
        encoder_hidden=tuple(job["model_config"]["encoder_hidden"]),
        classifier_hidden=tuple(job["model_config"]["classifier_hidden"]),
    )
    state = init_model(spec, seed=config.seed)
    run_dir = job["run_dir"]
    os.makedirs(run_dir, exist_ok=True)
    atomic_write_text(os.path.join(run_dir, "config.json"), job["config_echo"])
    atomic_write_text(
        os.path.join(run_dir, "run.json"),
        json.dumps(
            {
                "name": job["name"],
                "method": config.method,
                "seed": config.seed,
                "dataset": job["dataset"],
                "model_config": job["model_config"],
                "train_config": job["train_config"],
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
    )
    best_state, metrics = trainer.train(
        config, dataset, state, metrics_path=os.path.join(run_dir, "metrics.csv")
    )
    save_model(best_state, os.path.join(run_dir, "checkpoint.umck"))
    trainer.export_embeddings(best_state, dataset.test.batch, os.path.join(run_dir, "embeddings.csv"))
    return metrics.final.accuracy_multimodal


def cmd_gen(args):
    doc = _load_json(args.spec)
    if isinstance(doc, dict) and "synth" in doc:
        doc = doc["synth"]
    spec = synthgen.spec_from_dict(doc)
    dataset = synthgen.generate(spec)
    checksum = synthgen.save(dataset, args.out)
    print(f"{checksum}  {args.out}")
    return 0


def cmd_train(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        config_echo = fh.read()
    experiment = _parse_experiment(json.loads(config_echo), os.path.dirname(os.path.abspath(args.config)))
    if not os.path.exists(experiment["dataset"]):
        raise ConfigurationError(
            f"dataset {experiment['dataset']} does not exist (run `unismmc gen` first)"
        )
    dataset = synthgen.load(experiment["dataset"])
    if experiment["synth"] is not None and dataset.spec != experiment["synth"]:
        raise ConfigurationError(
            "config embeds a dataset spec that does not match the dataset file"
        )

    jobs = []
    for entry in experiment["methods"]:
        for seed in experiment["seeds"]:
            config = _train_config(experiment["train"], entry, seed)
            jobs.append(
                {
                    "name": entry["name"],
                    "dataset": experiment["dataset"],
                    "model_config": experiment["model"],
                    "train_config": dataclasses.asdict(config),
                    "run_dir": os.path.join(args.out, f"{entry['name']}-seed{seed}"),
                    "config_echo": config_echo,
                }
            )
    os.makedirs(args.out, exist_ok=True)
    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            list(pool.map(_execute_run, jobs))
    else:
        for job in jobs:
            _execute_run(job)

    by_name = {}
    for job in jobs:
        metrics = trainer.read_metrics(os.path.join(job["run_dir"], "metrics.csv"))
        by_name.setdefault(job["name"], []).append(metrics.final.accuracy_multimodal)
    lines = ["method,runs,mean_accuracy,std_accuracy,min_accuracy,max_accuracy"]
    for entry in experiment["methods"]:
        accs = np.asarray(by_name[entry["name"]])
        cells = [float(accs.mean()), float(accs.std()), float(accs.min()), float(accs.max())]
        lines.append(f"{entry['name']},{len(accs)}," + ",".join(repr(c) for c in cells))
        print(f"{entry['name']}: {accs.mean():.4f} +/- {accs.std():.4f} over {len(accs)} seed(s)")
    atomic_write_text(os.path.join(args.out, "summary.csv"), "\n".join(lines) + "\n")
    return 0


def cmd_consistency(args):
    if len(args.run_dirs) < 2:
        raise ConfigurationError("consistency needs at least two completed run directories")
    rows = []
    for run_dir in args.run_dirs:
        metrics_path = os.path.join(run_dir, "metrics.csv")
        if not os.path.exists(metrics_path):
            raise ConfigurationError(f"{run_dir}: missing metrics file {metrics_path}")
        metrics = trainer.read_metrics(metrics_path)
        if metrics.final is None:
            raise ConfigurationError(f"{run_dir}: run did not complete (no final record)")
        name = metrics.method
        run_json = os.path.join(run_dir, "run.json")
        if os.path.exists(run_json):
            name = _load_json(run_json).get("name", name)
        rows.append((run_dir, name, metrics.final))
    print("run,method,both_correct,both_wrong,exclusive")
    for run_dir, name, final in rows:
        print(f"{run_dir},{name},{final.both_correct!r},{final.both_wrong!r},{final.exclusive!r}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="unismmc",
        description="Synthetic-scale multimodal contrastive learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic multimodal dataset")
    gen.add_argument("--spec", required=True, help="JSON dataset spec (or experiment config with 'synth')")
    gen.add_argument("--out", required=True, help="output dataset file")
    gen.set_defaults(handler=cmd_gen)

    train = sub.add_parser("train", help="run a (methods x seeds) training sweep")
    train.add_argument("--config", required=True, help="JSON experiment config")
    train.add_argument("--out", required=True, help="output directory for run subdirectories")
    train.add_argument("--parallel", type=int, default=1, help="number of parallel run processes")
    train.set_defaults(handler=cmd_train)

    consistency = sub.add_parser(
        "consistency", help="tabulate unimodal prediction consistency of completed runs"
    )
    consistency.add_argument("run_dirs", nargs="+", help="run directories to compare")
    consistency.set_defaults(handler=cmd_consistency)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (
        ConfigurationError,
        DataError,
        DegenerateInputError,
        FormatError,
        ShapeError,
        TrainingDiverged,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
