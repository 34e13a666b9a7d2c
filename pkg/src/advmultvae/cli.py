"""Command line entry point: ``advmultvae <verb> --config cfg.yaml``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiment as ex
from .attacker import AttackError
from .config import CONFIG_ENV, ConfigError, load
from .model import CheckpointError
from .synthetic import SyntheticSpec
from .trainer import TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advmultvae", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help=f"YAML config (default: ${CONFIG_ENV})")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--workers", type=int, help="parallel training tasks")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        return sp

    common(sub.add_parser("preprocess", help="parse, filter and cache the dataset"))
    run = common(sub.add_parser("run", help="train one model family on all folds"))
    run.add_argument("family", choices=ex.FAMILIES)
    att = common(sub.add_parser("attack", help="probe trained latents with fresh attackers"))
    att.add_argument("variants", nargs="*", metavar="variant",
                     help=f"subset of {', '.join(ex.VARIANTS)} (default: all)")
    common(sub.add_parser("report", help="write summary tables and curve series"))
    common(sub.add_parser("sweep", help="gradient reversal scaling sweep"))

    gen = sub.add_parser("genseed", help="write a synthetic biased dataset")
    gen.add_argument("--out", required=True)
    d = SyntheticSpec()
    gen.add_argument("--users", type=int, default=d.users)
    gen.add_argument("--items", type=int, default=d.items)
    gen.add_argument("--p-own", type=float, default=d.p_own)
    gen.add_argument("--p-other", type=float, default=d.p_other)
    gen.add_argument("--p-shared", type=float, default=d.p_shared)
    gen.add_argument("--seed", type=int, default=d.seed)
    return p


def _config(args):
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise ConfigError(f"no configuration given (use --config or set {CONFIG_ENV})")
    cfg = load(path)
    if args.out:
        cfg.out = Path(args.out)
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "genseed":
            spec = SyntheticSpec(args.users, args.items, args.p_own, args.p_other, args.p_shared, args.seed)
            ex.cmd_genseed(args.out, spec)
            return EXIT_OK
        cfg = _config(args)
        if args.verb == "preprocess":
            ex.cmd_preprocess(cfg)
        elif args.verb == "run":
            ex.cmd_run(cfg, args.family)
        elif args.verb == "attack":
            ex.cmd_attack(cfg, args.variants or None)
        elif args.verb == "report":
            ex.cmd_report(cfg)
        elif args.verb == "sweep":
            ex.cmd_sweep(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ex.DataError, CheckpointError, AttackError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
