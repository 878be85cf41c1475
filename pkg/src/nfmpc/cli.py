"""Command-line entry point: ``nfmpc {train,eval,verify,timing}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench, verify
from .controller import ConfigurationError
from .training import train

EXIT_CONFIG = 2
EXIT_IO = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nfmpc", description="Flow-based MPPI experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "timing"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--episodes", type=int)
        if name != "train":
            s.add_argument("--samples", type=str, help="comma-separated sample counts")
            s.add_argument("--controller", type=str, help="comma-separated controller names")
    v = sub.add_parser("verify")
    v.add_argument("--checks", type=str, help=f"comma-separated subset of {','.join(verify.CHECKS)}")
    v.add_argument("--out", type=Path)
    return p


def _train(args) -> int:
    config = bench.load_config(args.config, seed=args.seed)
    tcfg = bench.train_config(config)
    if args.episodes is not None:
        tcfg.episodes = args.episodes
        if tcfg.val_every and tcfg.episodes % tcfg.val_every:
            tcfg.val_every = 0
    logging.info("training %d episodes into %s", tcfg.episodes, args.out)
    result = train(tcfg, args.out, progress=lambda row: logging.info("%s", row))
    print(f"best episode {result.best_episode}; checkpoints in {args.out}")
    return 0


def _evaluate(args):
    overrides = {"seed": args.seed, "episodes": args.episodes, "samples": args.samples,
                 "controllers": args.controller}
    config = bench.load_config(args.config, **overrides)
    rows, records, timings = bench.run_experiment(config)
    bench.emit_outputs(rows, records, timings, args.out, config)
    return rows, timings


def _eval(args) -> int:
    rows, _ = _evaluate(args)
    sys.stdout.write(bench.summary_csv(rows))
    return 0


def _timing(args) -> int:
    _, timings = _evaluate(args)
    text = bench.timing_csv(bench.timing_report(timings))
    (args.out / "timing.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def _verify(args) -> int:
    names = args.checks.split(",") if args.checks else None
    unknown = [n for n in names or [] if n not in verify.CHECKS]
    if unknown:
        raise ConfigurationError(f"unknown checks {unknown}")
    results = verify.run_checks(names)
    lines = [r.line() for r in results]
    print("\n".join(lines))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "verify.txt").write_text("\n".join(lines) + "\n")
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = _parser().parse_args(argv)
    handler = {"train": _train, "eval": _eval, "verify": _verify, "timing": _timing}[args.command]
    try:
        return handler(args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
