"""Command line entry point: ``utae-paps {train,evaluate,predict,ablate,gen-data}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import (ConfigError, Divergence, IncompatibleCheckpoint, InvalidFold,
                      UTAEPaPsError)
from ..sitsgen import write_dataset
from .config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--fold", type=int, help="fold 1..5 (overrides the config)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", type=str, help="output directory (overrides the config)")
    p.add_argument("--device", type=str, help="torch device, e.g. cpu or cuda:0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="utae-paps", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory (default <out>/best)")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))

    p = sub.add_parser("predict", help="write maps and figures for one sample")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--sample", default="0", help="sample index or id")

    p = sub.add_parser("ablate", help="train and compare model variants")
    _common(p)
    p.add_argument("--variants", default="full,skip_mean,single_date",
                   help="comma-separated variants")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--n-samples", type=int, help="number of patches (overrides the config)")
    return parser


def run(args) -> int:
    from . import training

    overrides = {"fold": args.fold, "seed": args.seed, "out": args.out, "device": args.device}
    config = load_config(args.config, **overrides)
    if args.command == "gen-data":
        gen = config.data.synthetic
        if args.seed is not None:
            from dataclasses import replace
            gen = replace(gen, seed=args.seed)
        root = write_dataset(gen, args.n_samples or config.data.n_samples,
                             args.out or config.data.root or config.out)
        print(root)
        return EXIT_OK
    if args.command == "train":
        res = training.train(config, resume=args.resume)
        print(json.dumps({"best_epoch": res.best_epoch, "best_metric": res.best_metric}))
    elif args.command == "evaluate":
        rep = training.evaluate(config, args.checkpoint, args.split)
        keys = ("OA", "mIoU") if rep.get("panoptic") is None else ("SQ", "RQ", "PQ")
        src = rep["semantic"] if rep.get("panoptic") is None else rep["panoptic"]
        print(json.dumps({k: src[k] for k in keys}))
    elif args.command == "predict":
        paths = training.predict(config, args.checkpoint, args.sample)
        print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    elif args.command == "ablate":
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        rows = training.ablate(config, variants)
        print(json.dumps(rows, indent=1, default=float))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, InvalidFold, IncompatibleCheckpoint) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Divergence as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (UTAEPaPsError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
