#!/usr/bin/env python3
"""Reproduce the component and gate-threshold ablation tables.

Runs the `components` and `alpha` grids under the noisy oracle over seeds
1..N and writes per-grid results/summary CSVs.
"""

import argparse
from pathlib import Path

from weakground import ablation, scenes
from weakground.config import Config, apply_overrides

NOISY = ["oracle.p_clean=0.5", "oracle.p_dilate=0.15", "oracle.p_erode=0.15",
         "oracle.p_distractor=0.2"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True, help="dataset file (see gen-data)")
    ap.add_argument("--out", default="ablations")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    dataset = scenes.load(args.data)
    base = apply_overrides(Config(), NOISY)
    seeds = list(range(1, args.seeds + 1))
    for grid in ("components", "alpha"):
        out = Path(args.out) / grid
        ablation.run_ablation(base, dataset, ablation.GRIDS[grid](), seeds,
                              out_dir=out, log=lambda s: print(s, flush=True))
        print(f"wrote {out}/results.csv and {out}/summary.csv")


if __name__ == "__main__":
    main()
