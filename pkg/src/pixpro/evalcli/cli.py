"""Command-line entry point: ``pixpro <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from ..data import load_dataset
from ..trainer.checkpoint import load_checkpoint
from ..trainer.config import TrainRunConfig, load_config
from ..trainer.config import _coerce as coerce_field
from ..trainer.loop import load_model, run_pretrain
from .ablation import expand_grid, run_ablation
from .gradsuite import run_gradient_suite
from .probes import (
    EvalReport,
    collapse_diagnostic,
    correspondence_eval,
    file_digest,
    linear_probe,
)
from .synthetic import gen_synthetic_dataset


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    group = p.add_argument_group("config overrides")
    for f in fields(TrainRunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar="V")


def _config_from(args) -> TrainRunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config:
        return load_config(args.config, overrides)
    return TrainRunConfig.from_dict(overrides)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args) -> int:
    out = gen_synthetic_dataset(args.n, args.size, args.classes, args.seed, args.out)
    _emit({"dataset": str(out), "n_images": args.n})
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config_from(args)
    data = args.data or cfg.dataset
    if not data:
        raise ValueError("no dataset: pass --data or set dataset in the config")
    cfg = cfg.replace(dataset=str(data))
    dataset = load_dataset(data, with_label_maps=False)
    result = run_pretrain(cfg, args.out, dataset=dataset, resume=not args.no_resume, stop_at=args.stop_at)
    _emit({"checkpoint": str(result.checkpoint), "metrics": str(result.metrics), "step": result.state.step})
    return 0


def cmd_eval_probe(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    ds = load_dataset(args.data, with_label_maps=False)
    if ds.labels is None:
        raise ValueError(f"dataset {args.data} has no image labels")
    acc = linear_probe(model, ds.images, ds.labels, args.epochs, args.seed)
    _emit(EvalReport("linear_probe_top1", acc, cfg.digest(), file_digest(args.checkpoint), [args.seed]).to_dict())
    return 0


def cmd_eval_correspondence(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    ds = load_dataset(args.data, with_label_maps=False)
    r = correspondence_eval(model, ds.images, args.pairs, args.seed, cfg)
    _emit(EvalReport("correspondence_acc", r.accuracy, cfg.digest(), file_digest(args.checkpoint), [args.seed],
                     {"chance": r.chance, "cells": r.cells, "pairs": r.pairs}).to_dict())
    return 0


def cmd_diagnose_collapse(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    ds = load_dataset(args.data, with_label_maps=False)
    r = collapse_diagnostic(model, ds.images, args.threshold)
    _emit(EvalReport("embed_std_mean", r.mean_std, cfg.digest(), file_digest(args.checkpoint), [],
                     {"collapsed": r.collapsed, "per_channel_std": r.per_channel_std.tolist()}).to_dict())
    return 0


def _parse_axis(text: str) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    if not sep or not values:
        raise ValueError(f"grid axis must look like key=v1,v2,...; got {text!r}")
    return key.strip().replace("-", "_"), [v.strip() for v in values.split(",")]


def cmd_ablate(args) -> int:
    base = _config_from(args)
    axes = dict(_parse_axis(a) for a in args.grid or [])
    schema = {f.name: f for f in fields(TrainRunConfig)}
    unknown = set(axes) - set(schema)
    if unknown:
        raise ValueError(f"unknown grid keys: {', '.join(sorted(unknown))}")
    # values arrive as strings; coerce through the config schema
    grid = [{k: coerce_field(schema[k], v) for k, v in cell.items()} for cell in expand_grid(axes)]
    dataset = load_dataset(args.data, with_label_maps=False)
    probe = load_dataset(args.probe_data, with_label_maps=False) if args.probe_data else None
    rows = run_ablation(grid or [{}], base, args.out, dataset, probe, args.pairs, args.eval_seed)
    for r in rows:
        _emit({k: r[k] for k in ("overrides", "status", "metrics")})
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(args.seed, args.instances)
    for r in results:
        _emit({"case": r.case, "instances": r.instances, "max_rel_error": r.max_rel_error, "passed": r.passed})
    return 0 if all(r.passed for r in results) else 1


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"step {ckpt.step}  version {ckpt.version}  config {ckpt.config_digest[:16]}")
    for name, dtype, shape in ckpt.manifest():
        print(f"{name}\t{dtype}\t{'x'.join(map(str, shape)) or 'scalar'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixpro", description="Pixel-level self-supervised pre-training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run or resume pre-training")
    _add_config_flags(p)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--no-resume", action="store_true")
    p.add_argument("--stop-at", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval-probe", help="linear probe on frozen pooled features")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_probe)

    p = sub.add_parser("eval-correspondence", help="dense cross-view retrieval accuracy")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_correspondence)

    p = sub.add_parser("diagnose-collapse", help="per-channel spread of normalised embeddings")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.01)
    p.set_defaults(func=cmd_diagnose_collapse)

    p = sub.add_parser("ablate", help="grid of pretrain + probes")
    _add_config_flags(p)
    p.add_argument("--grid", action="append", help="axis as key=v1,v2,... (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--probe-data")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=256)
    # --seed is taken by the config overrides; this one seeds the probes
    p.add_argument("--eval-seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
