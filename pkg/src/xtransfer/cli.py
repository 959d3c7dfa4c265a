"""Command line: ``xtransfer {gen-sources,run,eval,report}``.

Exit codes: 0 success, 3 missing/unwritable file, otherwise the
``exit_code`` of the raised error class (see ``errors.EXIT_CODES``);
unexpected exceptions exit 1 and usage errors exit 2.
"""
from __future__ import annotations

import argparse
import sys

from . import runner
from .config import ExperimentConfig, load_config
from .errors import IO_EXIT_CODE, ConfigError, XTransferError


def _shots(text):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shot list {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("shots must be positive integers")
    return vals


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory (eval: report file)")

    p = argparse.ArgumentParser(prog="xtransfer", description="Layer-wise repair and recombination experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-sources", parents=[common], help="generate source model manifests")
    r = sub.add_parser("run", parents=[common], help="run the pipeline for every shot and fold")
    r.add_argument("--shots", type=_shots, help="comma-separated shot counts, e.g. 3,5,10")
    r.add_argument("--budget", type=float, help="resource budget (fraction of the reference backbone)")
    r.add_argument("--jobs", type=int, default=1, help="worker processes (XTRANSFER_JOBS overrides)")
    e = sub.add_parser("eval", parents=[common], help="evaluate a saved recombined model")
    e.add_argument("model", help="recombined model manifest (.json)")
    e.add_argument("--shots", type=_shots, help="shot count of the evaluation task (one value)")
    e.add_argument("--fold", type=int, help="held-out user of the evaluation task")
    rp = sub.add_parser("report", help="rebuild reports from a run directory")
    rp.add_argument("run_dir")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "shots", None) is not None and args.command == "run":
        kw["shots"] = args.shots
    if getattr(args, "budget", None) is not None:
        if not args.budget > 0:
            raise ConfigError("budget must be positive")
        kw["budget"] = args.budget
    if args.out is not None and args.command != "eval":
        kw["out_dir"] = args.out
    return cfg.replace(**kw) if kw else cfg


def dispatch(args):
    if args.command == "report":
        runner.cmd_report(args.run_dir)
        return
    cfg = _config(args)
    if args.command == "gen-sources":
        runner.cmd_gen_sources(cfg)
    elif args.command == "run":
        runner.cmd_run(cfg, jobs=args.jobs)
    elif args.command == "eval":
        if args.shots is not None and len(args.shots) != 1:
            raise ConfigError("eval takes a single shot count")
        shot = None if args.shots is None else args.shots[0]
        runner.cmd_eval(args.model, cfg if args.config or args.seed is not None else None,
                        shot=shot, fold=args.fold, out=args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except XTransferError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return IO_EXIT_CODE
    return 0


if __name__ == "__main__":
    sys.exit(main())
