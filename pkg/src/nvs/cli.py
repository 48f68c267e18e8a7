"""``nvs`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .diffusion import COND_MODES
from .exceptions import NVSError
from .pipeline import STAGES, RunConfig, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvs", description="Unposed sparse-view synthesis pipeline.")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", help="YAML file with settings (a resolved snapshot works too)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory shared by all stages")
        p.add_argument("--cond", choices=COND_MODES, help="conditioning ablation")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = RunConfig.load(args.stage, args.config, seed=args.seed, out=args.out, cond=args.cond)
        result = run(cfg)
    except NVSError as err:
        print(f"nvs {args.stage}: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
