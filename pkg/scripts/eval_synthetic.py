"""Train on a few translated pairs, then measure corner error and match accuracy on fresh ones.

Homography-kind pairs (rotation + shift) probe generalisation beyond the
training distribution; expect them to be harder than translations.

    python scripts/eval_synthetic.py --train 4 --test 8 --steps 400
"""

import argparse
import json

import numpy as np

from oamatch import geometry, pipeline, synth
from oamatch.config import PipelineConfig


def evaluate(pairs, weights, cfg):
    corner, acc = [], []
    for p in pairs:
        res = pipeline.forward((p.img_a, p.img_b), weights, cfg)
        err = pipeline.match_errors(res, p.warp_ab)
        acc.append(float(np.mean(err < 4.0)) if len(err) else 0.0)
        H, _ = (None, None) if len(err) < 4 else geometry.ransac_homography(
            res.matches.coords_a, res.matches.coords_b, 3.0, 500, cfg.seed
        )
        corner.append(np.inf if H is None else geometry.ccm(H, p.homography, *p.shape[::-1]))
    return {
        "ccm": geometry.ccm_fractions(corner),
        "mean_within_4px": float(np.mean(acc)),
        "corner_errors": [None if not np.isfinite(c) else round(float(c), 3) for c in corner],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=4)
    ap.add_argument("--test", type=int, default=8)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = PipelineConfig.toy(seed=args.seed)
    train = synth.synth_dataset(args.train, args.size, args.seed, "translation")
    result = pipeline.train_toy(train, cfg, args.steps)
    report = {
        "loss_ratio": result.losses[-1] / result.losses[0],
        "train": evaluate(train, result.weights, cfg),
        "test_translation": evaluate(synth.synth_dataset(args.test, args.size, args.seed + 1), result.weights, cfg),
        "test_homography": evaluate(
            synth.synth_dataset(args.test, args.size, args.seed + 2, "homography"), result.weights, cfg
        ),
    }
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
