"""Command-line interface.

Subcommands: gen-data, train, denoise, eval, ablate. Every command
prints a one-line JSON summary on success. Exit codes: 0 success, 2
invalid arguments, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .bilateral import FilterConfig
from .errors import (DataError, GeoGcnError, InvalidArgumentError,
                     TrainingDivergenceError)
from .pipeline import AblationStage, PipelineConfig, ablate, denoise, evaluate, train
from .shapes import SHAPE_KINDS, ShapeSpec, build_manifest, default_shape_specs

EXIT_OK = 0
EXIT_INVALID_ARGS = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

_DEFAULT_SCALES = "0.0025,0.005,0.01,0.015"


def _parse_scales(text: str) -> list[float]:
    try:
        scales = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise InvalidArgumentError(f"bad --scales value {text!r}") from None
    if not scales:
        raise InvalidArgumentError("--scales must list at least one value")
    return scales


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = args.seed
    if getattr(args, "train_mode", None) is not None:
        overrides["train_mode"] = args.train_mode
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _apply_filter_flags(config: PipelineConfig, args) -> PipelineConfig:
    updates = {}
    if args.filter_iters is not None:
        updates["iterations"] = args.filter_iters
    if args.filter_sigma is not None:
        updates["sigma"] = args.filter_sigma
    if args.filter_lambda is not None:
        updates["lam"] = args.filter_lambda
    if args.filter_k is not None:
        updates["k_neighbors"] = args.filter_k
    if args.eq5_literal:
        updates["literal_update"] = True
    if not updates:
        return config
    new_filter = dataclasses.replace(config.filter, **updates)
    return dataclasses.replace(config, filter=new_filter)


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _cmd_gen_data(args) -> int:
    scales = _parse_scales(args.scales)
    if args.shapes == "default":
        specs = default_shape_specs(args.points, args.seed, args.variant)
    else:
        kinds = [k.strip() for k in args.shapes.split(",") if k.strip()]
        if not kinds:
            raise InvalidArgumentError("--shapes must name at least one kind")
        for kind in kinds:
            if kind not in SHAPE_KINDS:
                raise InvalidArgumentError(
                    f"unknown shape {kind!r}; choose from {SHAPE_KINDS} or 'default'")
        base = args.seed + 1000 * args.variant
        specs = [ShapeSpec(kind, args.points, base + i)
                 for i, kind in enumerate(kinds)]
    manifest = build_manifest(specs, scales, args.out)
    _emit({"manifest": str(manifest),
           "shapes": len(specs),
           "entries": len(specs) * len(scales)})
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_config(args)
    stage = AblationStage.parse(args.stage)
    report = train(args.manifest, config, args.out, stage=stage,
                   dump_vn_path=args.dump_vn_samples)
    epochs = report["epochs"]
    _emit({
        "checkpoint": args.out,
        "report": str(Path(args.out).with_suffix(".report.json")),
        "stage": stage.value,
        "first_epoch_total": epochs[0]["mean_total"],
        "final_epoch_total": epochs[-1]["mean_total"],
    })
    return EXIT_OK


def _cmd_denoise(args) -> int:
    config = _apply_filter_flags(_load_config(args), args)
    stage = AblationStage.parse(args.stage)
    _, report = denoise(args.input, args.ckpt, config, stage, args.out)
    _emit(report)
    return EXIT_OK


def _cmd_eval(args) -> int:
    _emit(evaluate(args.denoised, args.clean))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = _load_config(args)
    report = ablate(args.manifest, config, args.out,
                    eval_manifest=args.eval_manifest)
    _emit({"report": args.out, "rows": report["rows"]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geogcn",
        description="Graph-convolutional point cloud denoising toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--shapes", default="default",
                     help="comma list of kinds, or 'default' for the 8-shape set")
    gen.add_argument("--scales", default=_DEFAULT_SCALES,
                     help="comma list of noise scales (fractions of bbox diagonal)")
    gen.add_argument("--points", type=int, default=5000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--variant", type=int, default=0,
                     help="nonzero picks a shifted held-out family")
    gen.set_defaults(func=_cmd_gen_data)

    tr = sub.add_parser("train", help="train the networks on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path (JSON)")
    tr.add_argument("--config", help="PipelineConfig JSON file")
    tr.add_argument("--stage", default="s3", help="s1, s2, or s3")
    tr.add_argument("--seed", type=int, help="override config rng_seed")
    tr.add_argument("--train-mode", choices=("joint", "sequential"))
    tr.add_argument("--dump-vn-samples", metavar="PATH",
                    help="write the first batch's VN sample sets to PATH")
    tr.set_defaults(func=_cmd_train)

    dn = sub.add_parser("denoise", help="denoise a cloud with a checkpoint")
    dn.add_argument("--in", dest="input", required=True)
    dn.add_argument("--ckpt", required=True)
    dn.add_argument("--out", required=True)
    dn.add_argument("--stage", default="s3")
    dn.add_argument("--config")
    dn.add_argument("--filter-iters", type=int)
    dn.add_argument("--filter-sigma", type=float)
    dn.add_argument("--filter-lambda", type=float)
    dn.add_argument("--filter-k", type=int)
    dn.add_argument("--eq5-literal", action="store_true",
                    help="use the scalar-weighted update form")
    dn.set_defaults(func=_cmd_denoise)

    ev = sub.add_parser("eval", help="CD and MSE of a denoised cloud")
    ev.add_argument("--denoised", required=True)
    ev.add_argument("--clean", required=True)
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="train and tabulate stages S1-S3")
    ab.add_argument("--manifest", required=True)
    ab.add_argument("--out", required=True, help="report path (JSON)")
    ab.add_argument("--config")
    ab.add_argument("--seed", type=int, help="override config rng_seed")
    ab.add_argument("--eval-manifest")
    ab.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidArgumentError as exc:
        print(f"geogcn: invalid arguments: {exc}", file=sys.stderr)
        return EXIT_INVALID_ARGS
    except TrainingDivergenceError as exc:
        print(f"geogcn: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DataError as exc:
        print(f"geogcn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GeoGcnError as exc:
        print(f"geogcn: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
