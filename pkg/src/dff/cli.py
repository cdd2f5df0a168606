"""Command-line interface.

Subcommands: ``gen-data``, ``train``, ``eval``, ``infer``, ``ablation``.
Configs are plain-text ``key = value`` files (see README for the key
lists).  Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import read_kv_file
from .errors import ConfigError, DimensionError, FileFormatError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dff",
        description="Dynamic multi-level feature fusion for semantic edge "
        "detection: synthetic benchmark, training and MF-at-ODS evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--config", help="key=value synthesis config file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--report", help="write per-class CSV here")
    p.add_argument("--thin", action="store_true", help="skeletonize predictions")

    p = sub.add_parser("infer", help="run one image, dump per-class PGMs")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--image", required=True, help="input P5/P6 image")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ablation", help="train and score all six fusion rows")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="base training config file")
    p.add_argument("--seeds", default="1,2,3", help="comma-separated seeds")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--jobs", type=int, default=None, help="parallel runs")
    return parser


def _cmd_gen_data(args) -> int:
    from .harness import SynthConfig, gen_dataset

    cfg = (
        SynthConfig.from_dict(read_kv_file(args.config))
        if args.config
        else SynthConfig()
    )
    out = gen_dataset(cfg, args.out)
    print(f"wrote {cfg.num_images} samples to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .harness import TrainConfig, train

    cfg = (
        TrainConfig.from_dict(read_kv_file(args.config))
        if args.config
        else TrainConfig()
    )
    record = train(cfg, args.data, args.out)
    print(
        f"trained {cfg.epochs} epochs: loss {record.loss_trace[0]:.2f} -> "
        f"{record.loss_trace[-1]:.2f}; checkpoint at {record.checkpoint_path}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import evaluate

    report, side5 = evaluate(
        args.ckpt, args.data, tolerance=args.tolerance, thin=args.thin
    )
    print(report.summary_text())
    print(f"side5-only mean MF: {side5.mean_mf:.4f}")
    if args.report:
        report.write_csv(args.report)
        print(f"per-class CSV written to {args.report}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    from .harness import infer_image

    written = infer_image(args.ckpt, args.image, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def _cmd_ablation(args) -> int:
    from .harness import TrainConfig, ablation

    base = (
        TrainConfig.from_dict(read_kv_file(args.config))
        if args.config
        else TrainConfig()
    )
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated ints, got {args.seeds!r}")
    result = ablation(
        args.data,
        args.out,
        seeds=seeds,
        base_cfg=base,
        tolerance=args.tolerance,
        jobs=args.jobs,
    )
    print(result.to_text())
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "ablation": _cmd_ablation,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DimensionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FileFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
