"""Overfit the toy matcher on one synthetic pair and report loss and match accuracy.

    python scripts/overfit_toy.py --steps 500 --out runs/overfit
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from oamatch import pipeline, synth
from oamatch.config import PipelineConfig, save_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--shift", type=float, nargs=2, default=(10.0, 6.0))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--lr", type=float)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = PipelineConfig.toy()
    pair = synth.synth_pair(args.size, args.seed, tuple(args.shift))
    t0 = time.perf_counter()
    result = pipeline.train_toy([pair], cfg, args.steps, args.lr, log_every=50)
    elapsed = time.perf_counter() - t0
    res = pipeline.forward((pair.img_a, pair.img_b), result.weights, cfg)
    err = pipeline.match_errors(res, pair.warp_ab)
    summary = {
        "steps": args.steps,
        "seconds": round(elapsed, 2),
        "loss_first": result.losses[0],
        "loss_last": result.losses[-1],
        "loss_ratio": result.losses[-1] / result.losses[0],
        "matches": int(len(err)),
        "within_4px": float(np.mean(err < 4.0)) if len(err) else 0.0,
        "median_error_px": float(np.median(err)) if len(err) else None,
        "covisible_cells": [int(res.cm_a.mask.sum()), int(res.cm_b.mask.sum())],
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        result.weights.save(args.out / "weights.json")
        save_config(cfg, args.out / "config.json")
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        (args.out / "losses.txt").write_text("".join(f"{x:.9g}\n" for x in result.losses))


if __name__ == "__main__":
    main()
