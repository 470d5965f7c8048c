#!/usr/bin/env python3
"""Pre-registered calibration protocol for the acceptance thresholds.

Stage A (clean oracle): the default config runs on seeds 1..5 over the
benchmark dataset; the end-to-end acceptance thresholds are the per-metric
minimum over seeds minus 0.02. Detector box quality at gt-center cells is
recorded per seed for the pretraining calibration test.

Stage B (noisy oracle): the component and alpha-sweep cells run on the same
seeds, sharing each seed's pretrained detector, to confirm the directional
orderings and the alpha spread before the thresholds are committed.

Numbers printed here get frozen into tests/test_acceptance.py; rerunning the
script afterwards must reproduce them bit-for-bit.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from weakground import consistency as cc
from weakground import model as modeling
from weakground import scenes, train
from weakground.config import Config, apply_overrides, to_dict

SEEDS = (1, 2, 3, 4, 5)
NOISY = ["oracle.p_clean=0.5", "oracle.p_dilate=0.15", "oracle.p_erode=0.15",
         "oracle.p_distractor=0.2"]
CELLS = [
    ("baseline", ["dvfe=false", "scl=false", "isl=false"]),
    ("dvfe", ["scl=false", "isl=false"]),
    ("dvfe_scl", ["isl=false"]),
    ("full_a0.3", []),
    ("full_a0.1", ["alpha=0.1"]),
    ("full_a0.2", ["alpha=0.2"]),
    ("full_a0.4", ["alpha=0.4"]),
]


def detector_calibration(dataset, frozen, cfg) -> float:
    """Mean IoU of the decoded box at each object's gt-center cell."""
    caches = modeling.precompute_caches(dataset.test, frozen, cfg)
    stride = 32
    n = cfg.data.image_size // stride
    ious = []
    for pair, cache in zip(dataset.test, caches):
        for obj in pair.scene.objects:
            cx, cy = obj.center()
            cell = min(int(cy // stride), n - 1) * n + min(int(cx // stride), n - 1)
            ious.append(cc.iou(
                cc.rasterize(cache.cell_boxes[cell], cfg.data.image_size,
                             cfg.data.image_size),
                cc.rasterize(obj.gt_box, cfg.data.image_size,
                             cfg.data.image_size)))
    return float(np.mean(ious))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="calibration")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base = Config()
    base.validate()
    d = base.data
    t0 = time.time()
    dataset = scenes.generate(d.seed, d.count, image_size=d.image_size,
                              min_objects=d.min_objects,
                              max_objects=d.max_objects,
                              split_fractions=d.split_fractions)
    print(f"dataset: {dataset.counts()} ({time.time() - t0:.0f}s)", flush=True)

    summary = {"config": to_dict(base), "seeds": list(SEEDS),
               "clean": {}, "detector_iou": {}, "noisy": {}}
    for seed in SEEDS:
        cfg_seed = apply_overrides(base, [f"seed={seed}"])
        t0 = time.time()
        frozen = train.pretrain(cfg_seed, dataset)
        det_iou = detector_calibration(dataset, frozen, cfg_seed)
        summary["detector_iou"][seed] = det_iou
        caches = {s: modeling.precompute_caches(dataset.split(s), frozen, cfg_seed)
                  for s in ("train", "test")}
        print(f"seed {seed}: pretrain {time.time() - t0:.0f}s, "
              f"detector IoU {det_iou:.4f}", flush=True)

        t0 = time.time()
        r = train.train(cfg_seed, dataset, frozen=frozen, caches=dict(caches))
        rep = r.final["test"]
        summary["clean"][seed] = {"rec_acc": rep.rec_acc, "res_miou": rep.res_miou}
        print(f"  clean default: rec {rep.rec_acc:.4f} res {rep.res_miou:.4f} "
              f"({time.time() - t0:.0f}s)", flush=True)

        for name, overrides in CELLS:
            cfg_cell = apply_overrides(cfg_seed, NOISY + overrides)
            t0 = time.time()
            r = train.train(cfg_cell, dataset, frozen=frozen, caches=dict(caches))
            rep = r.final["test"]
            summary["noisy"].setdefault(name, {})[seed] = {
                "rec_acc": rep.rec_acc, "res_miou": rep.res_miou}
            print(f"  noisy {name}: rec {rep.rec_acc:.4f} res {rep.res_miou:.4f} "
                  f"({time.time() - t0:.0f}s)", flush=True)

    clean_rec = [summary["clean"][s]["rec_acc"] for s in SEEDS]
    clean_res = [summary["clean"][s]["res_miou"] for s in SEEDS]
    summary["thresholds"] = {
        "rec_acc": min(clean_rec) - 0.02,
        "res_miou": min(clean_res) - 0.02,
        "detector_iou": min(summary["detector_iou"].values()) - 0.02,
    }
    print("\nclean rec per seed:", [f"{v:.4f}" for v in clean_rec])
    print("clean res per seed:", [f"{v:.4f}" for v in clean_res])
    print("proposed thresholds:", summary["thresholds"])

    print("\nnoisy seed-means:")
    for name, _ in CELLS:
        rec_m = np.mean([summary["noisy"][name][s]["rec_acc"] for s in SEEDS])
        res_m = np.mean([summary["noisy"][name][s]["res_miou"] for s in SEEDS])
        summary["noisy"][name]["mean"] = {"rec_acc": float(rec_m),
                                          "res_miou": float(res_m)}
        print(f"  {name}: rec {rec_m:.4f} res {res_m:.4f}")

    (out / "calibration.json").write_text(json.dumps(summary, indent=2,
                                                     default=str) + "\n")
    print(f"\nwrote {out / 'calibration.json'}")


if __name__ == "__main__":
    main()
