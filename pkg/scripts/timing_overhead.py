"""Per-step wall-clock of each controller relative to Gaussian MPPI across sample counts.

Flow-based controllers need a checkpoint (``"checkpoint"`` in the config or
--checkpoint). Without one, an untrained flow of the configured architecture
is used, which times the same arithmetic.

    python3 scripts/timing_overhead.py --out runs/timing
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from nfmpc import bench
from nfmpc.training import build_models, load_trained


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=Path(__file__).parent / "configs" / "timing.json")
    p.add_argument("--checkpoint", type=Path)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = bench.load_config(args.config)
    ckpt = args.checkpoint or cfg.checkpoint
    if ckpt:
        _, flow, shift = load_trained(ckpt)
    else:
        flow, shift = build_models(bench.train_config(cfg))
    rows, records, timings = bench.run_experiment(cfg, models=(flow, shift))
    bench.emit_outputs(rows, records, timings, args.out, cfg)
    text = bench.timing_csv(bench.timing_report(timings))
    (args.out / "timing.csv").write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
