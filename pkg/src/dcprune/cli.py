"""Command-line entry points: ``dcprune {train,prune,eval,complexity}``.

Configuration is a flat text file of ``section.key = value`` lines; every key
can also be given as a ``--section.key VALUE`` flag, which wins over the file.
Each command appends one JSON record to the report file (and prints it).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .data import (
    CheckpointError,
    DataError,
    Dataset,
    config_hash,
    load_checkpoint,
    load_cifar10,
    make_synthetic,
    save_checkpoint,
)
from .network import (
    ARCHITECTURES,
    FLOP_CONVENTION,
    NetworkDef,
    build_architecture,
    compact,
    count_flops,
    count_params,
)
from .pipeline import STRATEGIES, PruneConfig, evaluate, run_dcp, sub_seed, train

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dcprune")


class ConfigError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _shape(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.lower().replace(",", "x").split("x"))
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"shape must look like CxHxW, got {text!r}")
    return parts


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _optional_str(text: str) -> Optional[str]:
    return None if text.strip().lower() in ("", "none") else text.strip()


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str
    field: Optional[str] = None  # PruneConfig field for prune.* keys


SCHEMA: dict[str, Key] = {
    "run.seed": Key(int, 0, "master seed; all randomness derives from it"),
    "run.report": Key(_optional_str, None, "JSON-lines file to append the report record to"),
    "data.source": Key(_choice(("synthetic", "cifar10")), "synthetic", "dataset family"),
    "data.dir": Key(_optional_str, None, "CIFAR-10 directory (DCP_DATA_DIR overrides)"),
    "data.kind": Key(_choice(("gaussian-blobs", "informative-channel")), "gaussian-blobs", "synthetic generator"),
    "data.train_size": Key(int, 1000, "synthetic training examples"),
    "data.test_size": Key(int, 500, "synthetic test examples"),
    "data.classes": Key(int, 4, "synthetic class count"),
    "data.shape": Key(_shape, (3, 8, 8), "synthetic image shape CxHxW"),
    "data.informative": Key(int, 3, "informative channels (informative-channel kind)"),
    "data.signal": Key(float, 1.0, "class-signal scale"),
    "data.noise": Key(float, 1.0, "noise scale"),
    "data.distractor_scale": Key(float, 1.0, "extra scale on non-informative channels"),
    "model.arch": Key(_choice(ARCHITECTURES), "toy-cnn", "architecture"),
    "train.epochs": Key(int, 10, "total training epochs"),
    "train.lr": Key(float, 0.05, "peak learning rate (cosine schedule)"),
    "train.momentum": Key(float, 0.9, "SGD momentum"),
    "train.weight_decay": Key(float, 1e-4, "L2 weight decay"),
    "train.batch_size": Key(int, 64, "mini-batch size"),
    "train.augment": Key(_bool, False, "random crop + flip"),
    "train.resume": Key(_optional_str, None, "checkpoint to resume from"),
    "prune.lambda": Key(float, 1.0, "weight of the discrimination-aware loss", "lam"),
    "prune.keep_ratio": Key(float, 0.7, "fraction of input channels kept", "keep_ratio"),
    "prune.stop_mode": Key(_choice(("budget", "tolerance", "whichever-first")), "budget",
                           "selection stopping rule", "stop_mode"),
    "prune.epsilon": Key(float, 0.01, "relative-improvement stopping tolerance", "epsilon"),
    "prune.heads": Key(_optional_int, None, "number of auxiliary heads (auto when unset)", "heads"),
    "prune.strategy": Key(_choice(STRATEGIES), "dcp", "channel selection strategy", "strategy"),
    "prune.selection_lr": Key(float, 0.01, "step size of the active-set SGD", "selection_lr"),
    "prune.inner_steps": Key(int, 20, "SGD steps per greedy iteration", "inner_steps"),
    "prune.selection_batch": Key(int, 64, "mini-batch of the active-set SGD", "selection_batch"),
    "prune.subset_size": Key(int, 1000, "selection subset size", "subset_size"),
    "prune.head_bn_mode": Key(_choice(("batch", "train", "eval")), "batch",
                              "head BN statistics during selection", "head_bn_mode"),
    "prune.prune_input": Key(_bool, False, "also prune the raw input channels", "prune_input"),
    "prune.finetune_lr": Key(float, 0.01, "fine-tuning learning rate", "finetune_lr"),
    "prune.finetune_decay": Key(float, 1.0, "per-iteration learning-rate decay", "finetune_decay"),
    "prune.momentum": Key(float, 0.9, "fine-tuning momentum", "momentum"),
    "prune.weight_decay": Key(float, 1e-4, "fine-tuning weight decay", "weight_decay"),
    "prune.stage_epochs": Key(int, 1, "fine-tune epochs per stage", "stage_epochs"),
    "prune.final_epochs": Key(int, 2, "final whole-network fine-tune epochs", "final_epochs"),
    "prune.batch_size": Key(int, 64, "fine-tuning mini-batch size", "batch_size"),
    "prune.augment": Key(_bool, False, "augment fine-tuning batches", "augment"),
    "prune.compact": Key(_bool, True, "physically remove pruned channels before saving"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        raw[key] = value
    return raw


def resolve_config(raw: dict[str, str]) -> dict[str, Any]:
    cfg = {k: spec.default for k, spec in SCHEMA.items()}
    for key, text in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        try:
            cfg[key] = SCHEMA[key].parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}") from None
    return cfg


def prune_config(cfg: dict[str, Any]) -> PruneConfig:
    kwargs = {spec.field: cfg[k] for k, spec in SCHEMA.items() if spec.field}
    try:
        return PruneConfig(seed=cfg["run.seed"], **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _snapshot(cfg: dict[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items()) if k != "run.report"}


# ------------------------------------------------------------------ data


def load_data(cfg: dict[str, Any], split: str) -> Dataset:
    if cfg["data.source"] == "cifar10":
        return load_cifar10(cfg["data.dir"], split)
    n = cfg["data.train_size"] if split == "train" else cfg["data.test_size"]
    try:
        return make_synthetic(
            cfg["data.kind"], n, cfg["data.classes"], cfg["data.shape"], seed=cfg["run.seed"], split=split,
            informative=cfg["data.informative"], signal=cfg["data.signal"], noise=cfg["data.noise"],
            distractor_scale=cfg["data.distractor_scale"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _check_compatible(net: NetworkDef, ds: Dataset) -> None:
    if ds.num_classes != net.num_classes:
        raise DataError(f"dataset has {ds.num_classes} classes, model has {net.num_classes}")
    if tuple(ds.shape) != tuple(net.input_shape):
        raise DataError(f"dataset images are {ds.shape}, model expects {tuple(net.input_shape)}")


# ------------------------------------------------------------------ reports


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def make_record(command: str, body: dict, timing: Optional[dict] = None) -> dict:
    """Report record; ``report_hash`` covers everything except ``timing``."""
    record = {"schema_version": SCHEMA_VERSION, "command": command, **_jsonable(body)}
    blob = json.dumps(record, sort_keys=True, separators=(",", ":")).encode()
    record["report_hash"] = hashlib.sha256(blob).hexdigest()
    if timing is not None:
        record["timing"] = _jsonable(timing)
    return record


def emit(record: dict, cfg: dict[str, Any]) -> str:
    line = json.dumps(record, sort_keys=True, separators=(",", ":"))
    print(line)
    if cfg.get("run.report"):
        with open(cfg["run.report"], "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    return line


# ------------------------------------------------------------------ commands


def cmd_train(cfg: dict[str, Any], out: str) -> dict:
    t0 = time.perf_counter()
    seed = cfg["run.seed"]
    train_ds, test_ds = load_data(cfg, "train"), load_data(cfg, "test")
    if cfg["train.resume"]:
        net = load_checkpoint(cfg["train.resume"])
        if net.arch != cfg["model.arch"]:
            raise ConfigError(f"resume checkpoint is {net.arch}, config says {cfg['model.arch']}")
    else:
        net = build_architecture(cfg["model.arch"], train_ds.num_classes, sub_seed(seed, "init"), train_ds.shape)
    _check_compatible(net, train_ds)
    start = int(net.meta.get("epoch", 0))
    history = train(
        net, train_ds, cfg["train.epochs"], cfg["train.lr"], cfg["train.momentum"], cfg["train.weight_decay"],
        cfg["train.batch_size"], seed, cfg["train.augment"], start_epoch=start,
    )
    snap = _snapshot(cfg)
    save_checkpoint(net, out, {"config_hash": config_hash(snap), "seed": seed, "command": "train"})
    body = {
        "config": snap,
        "config_hash": config_hash(snap),
        "seed": seed,
        "checkpoint": str(out),
        "epochs": {"start": start, "end": int(net.meta.get("epoch", start))},
        "loss_history": history,
        "metrics": {**evaluate(net, test_ds), "params": count_params(net), "flops": count_flops(net)},
    }
    return make_record("train", body, {"wall_time": time.perf_counter() - t0, "timestamp": time.time()})


def cmd_prune(cfg: dict[str, Any], checkpoint: str, out: str) -> dict:
    seed = cfg["run.seed"]
    net = load_checkpoint(checkpoint)
    if net.arch != cfg["model.arch"]:
        raise ConfigError(f"checkpoint architecture {net.arch} does not match model.arch = {cfg['model.arch']}")
    pcfg = prune_config(cfg)
    train_ds, test_ds = load_data(cfg, "train"), load_data(cfg, "test")
    _check_compatible(net, train_ds)
    result = run_dcp(net, train_ds, pcfg, test_ds)
    pruned = compact(result.net) if cfg["prune.compact"] else result.net
    snap = _snapshot(cfg)
    save_checkpoint(pruned, out, {"config_hash": config_hash(snap), "seed": seed, "command": "prune",
                                  "source": Path(checkpoint).name})
    metrics = dict(result.metrics)
    wall = metrics.pop("wall_time", None)
    metrics["param_reduction"] = metrics["params_before"] / metrics["params_after"]
    metrics["flop_reduction"] = metrics["flops_before"] / metrics["flops_after"]
    body = {
        "config": snap,
        "config_hash": config_hash(snap),
        "seed": seed,
        "checkpoint": str(out),
        "stages": [list(s) for s in result.plan.stages],
        "layers": [
            {"layer": r.layer, "name": r.name, "c": r.channels, "kept": r.kept, "l20": r.l20,
             "selected": r.selected, "loss_first": r.loss_first, "loss_last": r.loss_last,
             "iterations": r.iterations, "backtracks": r.backtracks}
            for r in result.layers
        ],
        "metrics": metrics,
    }
    return make_record("prune", body, {"wall_time": wall, "timestamp": time.time()})


def cmd_eval(cfg: dict[str, Any], checkpoint: str, baseline: Optional[str] = None) -> dict:
    net = load_checkpoint(checkpoint)
    ds = load_data(cfg, "test")
    _check_compatible(net, ds)
    metrics = evaluate(net, ds)
    body = {"checkpoint": Path(checkpoint).name, "split": ds.split, "n": len(ds), "metrics": metrics}
    if baseline:
        base = load_checkpoint(baseline)
        _check_compatible(base, ds)
        ref = evaluate(base, ds)
        body["baseline"] = {"checkpoint": Path(baseline).name, "metrics": ref}
        # positive gap: the evaluated model is worse than the baseline
        body["error_gap"] = metrics["top1_error"] - ref["top1_error"]
    # no timing field: identical inputs give byte-identical records
    return make_record("eval", body)


def cmd_complexity(checkpoint: Optional[str] = None, arch: Optional[str] = None) -> dict:
    if checkpoint:
        net = load_checkpoint(checkpoint)
        source = Path(checkpoint).name
    elif arch:
        net = build_architecture(arch)
        source = arch
    else:
        raise ConfigError("complexity needs --checkpoint or --arch")
    body = {
        "source": source,
        "arch": net.arch,
        "input_shape": list(net.input_shape),
        "params": count_params(net),
        "flops": count_flops(net),
        "flop_convention": FLOP_CONVENTION,
    }
    return make_record("complexity", body)


# ------------------------------------------------------------------ argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcprune", description="Discrimination-aware channel pruning")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat 'section.key = value' config file")
        group = p.add_argument_group("config keys (override the file)")
        for key, spec in SCHEMA.items():
            group.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None, help=spec.help)

    p = sub.add_parser("train", help="train a baseline model")
    with_config(p)
    p.add_argument("--out", required=True, help="checkpoint to write")

    p = sub.add_parser("prune", help="prune a trained checkpoint")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="pruned checkpoint to write")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="reference checkpoint for the error gap")

    p = sub.add_parser("complexity", help="parameter and FLOP counts")
    p.add_argument("--checkpoint")
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--report", help="JSON-lines file to append to")
    return parser


def _gather_config(args: argparse.Namespace) -> dict[str, Any]:
    raw: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        raw.update(parse_config_text(text, str(path)))
    for key in SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return resolve_config(raw)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports unknown flags with status 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "complexity":
            record = cmd_complexity(args.checkpoint, args.arch)
            emit(record, {"run.report": args.report})
            return EXIT_OK
        cfg = _gather_config(args)
        if args.command == "train":
            record = cmd_train(cfg, args.out)
        elif args.command == "prune":
            record = cmd_prune(cfg, args.checkpoint, args.out)
        else:
            record = cmd_eval(cfg, args.checkpoint, args.baseline)
        emit(record, cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
