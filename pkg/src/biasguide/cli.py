"""Command-line entry point: ``biasguide <stage> [flags]``.

Flags override the config file; either may be omitted.  Exit codes:
0 success, 2 config/schema, 3 precondition, 4 input/format, 5 training,
6 contract violations, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from .errors import BiasGuideError
from .pipeline import Pipeline

EXIT_CODES = {"config": 2, "schema": 2, "precondition": 3, "input": 4, "format": 4, "training": 5,
              "contract": 6}

COMMANDS = {
    "generate-data": "generate",
    "pretrain": "pretrain",
    "train": "train",
    "evaluate": "evaluate",
    "report": "report",
    "run-all": "run_all",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    common.add_argument("--severity", type=float, help="percentage of bias-conflicting training samples")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=config_mod.MODES)
    common.add_argument("--out-dir", default="runs", help="root of all run directories (default: %(default)s)")
    common.add_argument("--force", action="store_true", help="re-run the stage even if it is up to date")
    common.add_argument("--no-guide-loss", action="store_true")
    common.add_argument("--no-bn-loss", action="store_true")
    common.add_argument("--pair-source", choices=config_mod.PAIR_SOURCES)
    common.add_argument("--no-score-weight", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="biasguide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    data, exp = {}, {}
    if args.severity is not None:
        data["severity"] = args.severity / 100.0
    if args.seed is not None:
        exp["seed"] = args.seed
    if args.mode is not None:
        exp["mode"] = args.mode
    if args.pair_source is not None:
        exp["pair_source"] = args.pair_source
    if args.no_guide_loss:
        exp["guide_loss"] = False
    if args.no_bn_loss:
        exp["bn_loss"] = False
    if args.no_score_weight:
        exp["score_weight"] = False
    return config_mod.override(cfg, data, exp).validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        pipe = Pipeline(cfg, args.out_dir, force=args.force)
        getattr(pipe, COMMANDS[args.command])()
    except BiasGuideError as exc:
        print(f"biasguide: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"biasguide: input error: {exc}", file=sys.stderr)
        return EXIT_CODES["input"]
    print(pipe.run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
