"""Train the desk-scale planar task for several seeds and compare against MPPI.

Writes one directory per training seed plus ``comparison.csv`` under --out.

    python3 scripts/desk_experiment.py --out runs/desk --seeds 0,1,2
"""

from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path

from nfmpc import bench
from nfmpc.training import train


def _log_every_100(row) -> None:
    if row["episode"] % 100 == 0:
        logging.info("%s", row)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--episodes", type=int, help="override the training budget")
    p.add_argument("--config", type=Path, default=Path(__file__).parent / "configs" / "desk.json")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    evaluation = bench.load_config(args.config, seed=0)
    baseline = bench.load_config(args.config, seed=0, controllers="mppi")
    rows = bench.run_experiment(baseline)[0]
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = bench.load_config(args.config, seed=seed)
        tcfg = bench.train_config(cfg)
        if args.episodes is not None:
            tcfg.episodes = args.episodes
        out = args.out / f"seed{seed}"
        result = train(tcfg, out, progress=_log_every_100)
        evaluation.controllers = [c for c in evaluation.controllers if c != "mppi"]
        seed_rows, records, timings = bench.run_experiment(evaluation, models=(result.flow, result.shift))
        bench.emit_outputs(seed_rows, records, timings, out / "eval", evaluation)
        rows += [{**r, "controller": f"{r['controller']}@seed{seed}"} for r in seed_rows]

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "comparison.csv").write_text(bench.summary_csv(rows))
    with open(args.out / "comparison.csv") as fh:
        for row in csv.reader(fh):
            print(",".join(row))


if __name__ == "__main__":
    main()
