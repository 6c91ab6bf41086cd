"""Command line entry point.

    otpr pretrain  --config cfg.txt --out runs/pre
    otpr finetune  --config cfg.txt --ckpt runs/pre/pretrained.ckpt --out runs/ft
    otpr eval      --ckpt runs/ft/finetuned.ckpt --episodes 100 --seed 0
    otpr ablate    --config cfg.txt --ckpt runs/pre/pretrained.ckpt --out runs/abl
    otpr ot-debug  --config cfg.txt --out runs/otdbg

Exit codes: 0 success, 2 config error, 3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import config as cfgmod
from . import harness
from .errors import ConfigError, FileFormatError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def build_parser():
    parser = argparse.ArgumentParser(prog="otpr", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=None, help="config file (key = value lines)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="train the diffusion policy on expert demos")

    ft = sub.add_parser("finetune", help="online fine-tuning from a checkpoint")
    ft.add_argument("--ckpt", required=True, help="pretrained checkpoint path")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--episodes", type=int, default=100)

    ab = sub.add_parser("ablate", help="guidance/mask ablation grid")
    ab.add_argument("--ckpt", required=True)

    sub.add_parser("ot-debug", help="dump a small oracle-vs-dual CSV instance")
    return parser


def _load_cfg(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.quiet:
        overrides["quiet"] = "true"
    return cfgmod.load_config(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pretrain":
            harness.cmd_pretrain(_load_cfg(args), args.out)
        elif args.command == "finetune":
            harness.cmd_finetune(_load_cfg(args), args.ckpt, args.out)
        elif args.command == "eval":
            cfg = _load_cfg(args)
            stats = harness.cmd_eval(args.ckpt, args.episodes, cfg["seed"], quiet=True)
            print(json.dumps(stats, indent=2))
        elif args.command == "ablate":
            harness.cmd_ablate(_load_cfg(args), args.ckpt, args.out)
        elif args.command == "ot-debug":
            harness.cmd_ot_debug(_load_cfg(args), args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
