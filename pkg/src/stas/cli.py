"""Command-line entry point: data generation, training stages, evaluation, prediction, reports.

Exit codes: 0 success, 2 configuration or usage error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, NumericalError, RunConfig, TrainConfig, desk_train_config
from .data import generate_dataset, load_dataset, save_dataset

log = logging.getLogger("stas")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
PREDICTION_HEADER = ("station_id", "timestamp", "y_tp", "y_rc", "y_t")
SPLITS = ("all", "ECbT", "ECbM", "ECbH", "ECbMi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_set(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then --set overrides, then --seed; STAS_SEED fills in an unset seed."""
    overrides = _parse_set(args.set or [])
    from_file = {}
    if args.config is not None:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"config file {args.config} not found")
        from .config import parse_config_file
        from_file = parse_config_file(args.config)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    elif "seed" not in overrides and "seed" not in from_file and os.environ.get("STAS_SEED"):
        overrides["seed"] = os.environ["STAS_SEED"]
    base = desk_train_config() if args.desk else TrainConfig()
    return RunConfig.resolve(args.config, overrides, train=base)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat `key = value` config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (falls back to $STAS_SEED)")
    p.add_argument("--desk", action="store_true",
                   help="start from CPU-sized training defaults instead of the full schedule")


def _load_model(path: str, cfg: TrainConfig):
    from .training import load_checkpoint

    model = load_checkpoint(path)
    if model.cfg.model_hash() != cfg.model_hash():
        raise ConfigError(f"config hash {cfg.model_hash()} does not match checkpoint "
                          f"{model.cfg.model_hash()} at {path}")
    model.cfg = cfg
    return model


def _dataset(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset directory {path} not found")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    run = resolve_config(args)
    splits = generate_dataset(run.generator, run.train.seed)
    save_dataset(args.out, splits)
    log.info("wrote %s", {k: len(v) for k, v in splits.items()})
    return EXIT_OK


def cmd_pretrain_sfm(args) -> int:
    from .training import STAS, pretrain_sfm, save_checkpoint, seed_everything

    run = resolve_config(args)
    cfg = run.train
    splits = _dataset(args.data)
    seed_everything(cfg)
    train, val = splits["train"].normalized(), splits["val"].normalized()
    model = _load_model(args.init, cfg) if args.init else STAS(cfg, train.meta)
    history = pretrain_sfm(model, train, cfg, val)
    model.sfm_ready = True
    save_checkpoint(args.out, model, [dict(stage="sfm", **h) for h in history])
    return EXIT_OK


def cmd_pretrain_tfm(args) -> int:
    from .training import STAS, compute_plans, pretrain_tfm, save_checkpoint, seed_everything

    run = resolve_config(args)
    cfg = run.train
    splits = _dataset(args.data)
    seed_everything(cfg)
    train = splits["train"].normalized()
    model = _load_model(args.init, cfg) if args.init else STAS(cfg, train.meta)
    plans, _ = compute_plans(model, train, cfg)
    history = pretrain_tfm(model, train, cfg, plans)
    model.tfm_ready = True
    save_checkpoint(args.out, model, [dict(stage="tfm", **h) for h in history])
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import fit, save_checkpoint

    run = resolve_config(args)
    cfg = run.train
    splits = _dataset(args.data)
    model = _load_model(args.init, cfg) if args.init else None
    history_path = args.history or str(Path(args.out) / "history.jsonl")
    result = fit(splits, cfg, history_path=history_path, model=model)
    save_checkpoint(args.out, result)
    log.info("best epoch %d; history in %s", result.best_epoch, history_path)
    return EXIT_OK


def _method_records(args, cfg: TrainConfig, splits, target_name: str):
    """(method name, PredictionRecords) for a checkpoint or a baseline on one split."""
    from .baselines import run_baseline
    from .training import predict

    target = splits[target_name]
    if args.method in ("LR", "MLP"):
        return args.method, run_baseline(args.method, splits["train"], target, cfg.seed, splits["val"])
    if not args.checkpoint:
        raise UsageError("STAS evaluation needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    model = _load_model(args.checkpoint, cfg)
    return "STAS", predict(model, target.normalized(), cfg)


def cmd_eval(args) -> int:
    from .metrics import write_report
    from .training import stratified_rows

    run = resolve_config(args)
    splits = _dataset(args.data)
    name, records = _method_records(args, run.train, splits, args.on)
    pred = np.array([r.y_t for r in records])
    rows = stratified_rows(name, pred, splits[args.on].labels[:, 0], run.train.seed,
                           None if args.split == "all-splits" else args.split)
    write_report(args.out, rows)
    sys.stdout.write(Path(args.out).read_text())
    return EXIT_OK


def write_predictions(path: str | Path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_HEADER)
        for r in records:
            writer.writerow([r.station_id, r.timestamp, repr(r.y_tp), repr(r.y_rc), repr(r.y_t)])
    return path


def cmd_predict(args) -> int:
    run = resolve_config(args)
    splits = _dataset(args.data)
    _, records = _method_records(args, run.train, splits, args.on)
    write_predictions(args.out, records)
    log.info("wrote %d predictions to %s", len(records), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import EmptyPredictions, build_report

    named = []
    for item in args.pred:
        name, _, path = item.rpartition("=")
        named.append((name or Path(path).stem, path))
    for _, path in named:
        if not Path(path).exists():
            raise FileNotFoundError(f"prediction file {path} not found")
    splits = _dataset(args.data)
    try:
        outputs = build_report(named, splits[args.on], args.out, n_frames=args.frames,
                               seed=args.seed or 0)
    except EmptyPredictions as exc:
        raise UsageError(str(exc)) from exc
    for p in outputs:
        log.info("wrote %s", p)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stas", description="Station precipitation bias correction with "
                                              "adaptive spatial scale and temporal lag selection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("pretrain-sfm", cmd_pretrain_sfm, "pretrain the spatial modules"),
                                 ("pretrain-tfm", cmd_pretrain_tfm,
                                  "pretrain the temporal modules and encoder-decoder"),
                                 ("train", cmd_train, "full schedule ending in joint training")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True, help="checkpoint directory to write")
        p.add_argument("--init", help="checkpoint to continue from")
        if name == "train":
            p.add_argument("--history", help="metric history JSON-lines path "
                                             "(default: <out>/history.jsonl)")
        p.set_defaults(func=func)

    for name, func in (("eval", cmd_eval), ("predict", cmd_predict)):
        p = sub.add_parser(name, help="metrics CSV" if name == "eval" else "per-station predictions CSV")
        _add_common(p)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--checkpoint", help="trained checkpoint (method STAS)")
        p.add_argument("--method", choices=("STAS", "LR", "MLP"), default="STAS")
        p.add_argument("--on", choices=("train", "val", "test"), default="test",
                       help="dataset split to run on")
        p.add_argument("--out", required=True, help="CSV path to write")
        if name == "eval":
            p.add_argument("--split", choices=SPLITS + ("all-splits",), default="all-splits",
                           help="intensity subset to report (default: every subset)")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="heatmaps and a Markdown summary from prediction CSVs")
    p.add_argument("--pred", action="append", required=True, metavar="[NAME=]PATH",
                   help="prediction CSV (repeatable; the first two are drawn side by side)")
    p.add_argument("--data", required=True, help="dataset directory holding the observations")
    p.add_argument("--on", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=3, help="number of timestamps to draw")
    p.add_argument("--seed", type=int, help="seed for the ECbMi mixture")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        sys.stderr.write(f"missing artifact: {exc}\n")
        return EXIT_MISSING
    except NumericalError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
