"""Command-line entry point.

Each subcommand runs the pipeline up to and including its stage; earlier
stages come from the stage cache when ``--resume`` is given and their
outputs exist. Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ARMS, ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

SUBCOMMANDS = {
    "simulate": "simulate",
    "align": "align",
    "select-voxels": "select-voxels",
    "train-encoder": "significance",  # the significance test runs with the encoder
    "train-decoder": "train-decoder",
    "reconstruct": "reconstruct",
    "evaluate": "evaluate",
    "report": "report",
}


def _csv(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from e
    return parse


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="experiment config (JSON); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--resume", action="store_true", help="reuse cached stage outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vidrecon", parents=[common],
                                description="Video reconstruction from simulated fMRI.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, parents=[common], help=f"run the pipeline through {name}")
        if name == "train-encoder":
            s.add_argument("--cosine-sign", choices=("aligned", "paper"),
                           help="'paper' uses +cos in the encoder loss instead of 1 - cos")
    a = sub.add_parser("ablate", parents=[common], help="run several arms and seeds and compare them")
    a.add_argument("--arms", type=_csv(str), default=["full", "supervised_only"],
                   help=f"comma-separated subset of {','.join(ARMS)}; the first is the reference")
    a.add_argument("--seeds", type=_csv(int), default=[0, 1, 2])
    return p


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    if getattr(args, "cosine_sign", None):
        loss = dataclasses.replace(cfg.encoder.loss, cosine_sign=args.cosine_sign)
        changes["encoder"] = dataclasses.replace(cfg.encoder, loss=loss)
    return cfg.replace(**changes).validate() if changes else cfg


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": None, "resume": False, "verbose": False}


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # heavy imports only after the arguments parse
    from .pipeline import RunLocked, StageFailure, run_ablation_matrix, run_pipeline

    try:
        cfg = _load_config(args)
        if args.command == "ablate":
            run_ablation_matrix(cfg, args.arms, args.seeds, resume=args.resume)
            print(f"{cfg.output_dir}/ablation.md")
        else:
            record = run_pipeline(cfg, resume=args.resume, until=SUBCOMMANDS[args.command])
            if record.metrics:
                for k, v in record.metrics.items():
                    print(f"{k}: {v}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageFailure, RunLocked) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
