"""Command-line entry point.

    jointcert train --config cfg.json [--out model.json] [--log steps.csv]
    jointcert eval --model model.json --data DIR --eps 0.1 [--pgd-steps 200] [--seed 0]
    jointcert verify --model model.json --data DIR --eps 0.1
    jointcert compare-baseline --config cfg.json

Exit codes: 0 ok, 1 bad arguments, 2 config/file errors, 3 training failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import data_io
from .data_io import Dataset
from .errors import (CheckpointError, ConfigError, DatasetError, DimensionError,
                     TrainingDivergedError)
from .evaluation import evaluate, verified_flags
from .training import TrainConfig, checkpoint_load, checkpoint_save, train, write_log_csv

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointcert", description="Joint adversarial + IBP certified training")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--log")

    for name, helptext in (("eval", "report standard / verified / PGD error"),
                           ("verify", "per-example IBP verification flags as CSV")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--model", required=True)
        e.add_argument("--data", required=True, help="directory with IDX image/label files")
        e.add_argument("--eps", type=float, required=True)
        if name == "eval":
            e.add_argument("--pgd-steps", type=int, default=200)
            e.add_argument("--pgd-step-size", type=float)
            e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("compare-baseline", help="joint vs fixed-weight training with identical seeds")
    c.add_argument("--config", required=True)
    return p


def load_config(path: str) -> TrainConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return TrainConfig.from_dict(doc)


_DATA_KEYS = {
    "blobs": {"kind", "n_per_class", "d", "separation", "seed", "test_n_per_class", "test_seed"},
    "mnist": {"kind", "dir", "train_limit", "test_limit", "flatten"},
}


def load_datasets(spec: dict, base_dir: str = ".") -> tuple[Dataset, Dataset]:
    """(train, test) datasets described by a config ``data`` section."""
    kind = spec.get("kind")
    if kind not in _DATA_KEYS:
        raise ConfigError(f"data.kind must be one of {sorted(_DATA_KEYS)}")
    unknown = sorted(set(spec) - _DATA_KEYS[kind])
    if unknown:
        raise ConfigError(f"unknown data keys: {', '.join(unknown)}")
    if kind == "blobs":
        n, d, sep = spec.get("n_per_class", 500), spec.get("d", 2), spec.get("separation", 8.0)
        seed = spec.get("seed", 0)
        train_ds = data_io.synthetic_blobs(n, d, sep, seed)
        test_ds = data_io.synthetic_blobs(spec.get("test_n_per_class", n), d, sep,
                                          spec.get("test_seed", seed + 1))
        return train_ds, test_ds
    directory = spec.get("dir")
    if directory is None:
        raise ConfigError("data.dir is required for mnist")
    if not os.path.isabs(directory):
        directory = os.path.join(base_dir, directory)
    train_ds = data_io.load_mnist(directory, "train", spec.get("train_limit"))
    test_ds = data_io.load_mnist(directory, "test", spec.get("test_limit"))
    if spec.get("flatten", False):
        train_ds, test_ds = train_ds.flatten(), test_ds.flatten()
    return train_ds, test_ds


def load_eval_dir(directory: str, input_shape) -> Dataset:
    """IDX pair from ``directory`` (test split preferred), reshaped to ``input_shape``."""
    try:
        ds = data_io.load_mnist(directory, "test")
    except FileNotFoundError:
        ds = data_io.load_mnist(directory, "train")
    if ds.images.shape[1:] != tuple(input_shape):
        if int(np.prod(ds.images.shape[1:])) != int(np.prod(input_shape)):
            raise DimensionError(f"data items of shape {ds.images.shape[1:]} cannot feed input {tuple(input_shape)}")
        ds = Dataset(ds.images.reshape(len(ds), *input_shape), ds.labels, ds.num_classes)
    return ds


def _eval_section(cfg: TrainConfig) -> dict:
    unknown = sorted(set(cfg.eval) - {"eps", "pgd_steps", "pgd_step_size", "seed"})
    if unknown:
        raise ConfigError(f"unknown eval keys: {', '.join(unknown)}")
    return {"eps": cfg.eval.get("eps", cfg.eps_train), "pgd_steps": cfg.eval.get("pgd_steps", 200),
            "step_size": cfg.eval.get("pgd_step_size"), "seed": cfg.eval.get("seed", 0)}


def run_config(cfg: TrainConfig, base_dir: str = "."):
    train_ds, test_ds = load_datasets(cfg.data, base_dir)
    result = train(cfg, train_ds)
    ev = _eval_section(cfg)
    report = evaluate(result.net, test_ds, ev["eps"], ev["pgd_steps"], ev["step_size"], ev["seed"])
    return result, report


def compare_baseline(cfg: TrainConfig, base_dir: str = ".") -> dict:
    reports = {}
    for mode in ("joint", "baseline"):
        d = cfg.to_dict()
        d["mode"] = mode
        _, report = run_config(TrainConfig.from_dict(d), base_dir)
        reports[mode] = report.to_dict()
    j, b = reports["joint"]["verified_error"], reports["baseline"]["verified_error"]
    reduction = (b - j) / b if b > 0 else 0.0
    return {"joint": reports["joint"], "baseline": reports["baseline"],
            "joint_verified_error": j, "baseline_verified_error": b, "relative_reduction": reduction}


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    result, report = run_config(cfg, base)
    if args.out:
        checkpoint_save(result.net, result.moments, args.out)
    if args.log:
        write_log_csv(result.log, args.log)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _cmd_eval(args) -> int:
    net, _ = checkpoint_load(args.model)
    ds = load_eval_dir(args.data, net.input_shape)
    report = evaluate(net, ds, args.eps, args.pgd_steps, args.pgd_step_size, args.seed)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _cmd_verify(args) -> int:
    net, _ = checkpoint_load(args.model)
    ds = load_eval_dir(args.data, net.input_shape)
    verified, preds, min_margin = verified_flags(net, ds, args.eps)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["index", "label", "prediction", "min_margin_lower", "verified"])
    for i in range(len(ds)):
        writer.writerow([i, int(ds.labels[i]), int(preds[i]), repr(float(min_margin[i])),
                         "true" if verified[i] else "false"])
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = load_config(args.config)
    out = compare_baseline(cfg, os.path.dirname(os.path.abspath(args.config)))
    print(json.dumps(out))
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "verify": _cmd_verify, "compare-baseline": _cmd_compare}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, DatasetError, DimensionError, OSError) as exc:
        sys.stderr.write(f"jointcert: {exc}\n")
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        sys.stderr.write(f"jointcert: training failed: {exc}\n")
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
