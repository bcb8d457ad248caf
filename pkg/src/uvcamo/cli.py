"""Command-line entry point: ``uvcamo <subcommand> [--config PATH] [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config

SUBCOMMANDS = ("gen-dataset", "train-efe", "train-detector", "gen-camo", "evaluate", "report", "selftest")

logger = logging.getLogger("uvcamo")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON pipeline configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="uvcamo", description="Physical adversarial camouflage pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    helps = {
        "gen-dataset": "render the synthetic scene grid and its manifest",
        "train-efe": "train the environment feature extractor",
        "train-detector": "train the toy grid detector on benign paint jobs",
        "gen-camo": "optimize the adversarial texture",
        "evaluate": "AP@0.5 of benign, random and adversarial textures",
        "report": "summary, per-axis curves and plots from evaluation results",
        "selftest": "gradient and loss-oracle checks",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "evaluate":
            p.add_argument("--split", action="append", choices=("eval-seen", "eval-unseen"),
                           help="evaluate only this split (repeatable)")
        if name == "gen-camo":
            p.add_argument("--loss", choices=("all-boxes", "center-cell"), help="override camo.loss")
    return parser


def _run(args):
    from . import pipeline
    from .selftest import run_selftest

    if args.command == "selftest":
        return 0 if run_selftest(verbose=True) else 1

    overrides = {"seed": args.seed, "out_dir": args.out, "deterministic": args.deterministic}
    cfg = load_config(args.config, overrides)
    if getattr(args, "loss", None):
        cfg.camo.loss = args.loss
    if cfg.deterministic:
        pipeline.set_deterministic(True)
    pipe = pipeline.Pipeline(cfg)
    if args.command == "gen-dataset":
        pipe.gen_dataset()
    elif args.command == "train-efe":
        est = pipe.train_efe()
        print(f"EFE test MAE {est.test_error_.mean():.4f} -> {pipe.efe_path}")
    elif args.command == "train-detector":
        det = pipe.train_detector()
        print(f"detector benign AP@0.5 {det.eval_ap_:.3f} -> {pipe.detector_path}")
    elif args.command == "gen-camo":
        pipe.gen_camo()
        print(f"texture -> {pipe.texture_path}")
    elif args.command == "evaluate":
        results = pipe.evaluate(splits=tuple(args.split) if args.split else pipeline.EVAL_SPLITS)
        for name, per_split in results.items():
            for split, res in per_split.items():
                print(f"{name:12s} {split:12s} AP@0.5 {res.ap:.4f}")
    elif args.command == "report":
        pipe.report()
        print(f"report -> {pipe.out / 'report'}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as err:
        print("invalid configuration:", file=sys.stderr)
        for field, msg in err.errors:
            print(f"  {field}: {msg}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, RuntimeError) as err:
        print(f"uvcamo {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
