"""Command-line front end.

Exit codes: 0 success, 1 user error (bad paths, flags, files), 2 internal
invariant violation (failed verification, stage failure, non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import backbone, geometry, matching, pipeline, pnm, synth, verify
from .attention import attention_weights
from .config import CONFIG_ENV, PipelineConfig, load_config, save_config
from .pipeline import MatcherWeights

logger = logging.getLogger("oamatch")

TOP_RAYS = 32


class UserError(Exception):
    """Bad input from the command line; reported with exit code 1."""


class InvariantError(Exception):
    """An internal check failed; reported with exit code 2."""


# ---------------------------------------------------------------- shared loading


def _config(args, fallback: PipelineConfig | None = None) -> PipelineConfig:
    path = args.config
    weights = getattr(args, "weights", None)
    if not path and not os.environ.get(CONFIG_ENV) and weights:
        # weights written by 'train' sit next to the config they were trained with
        sibling = Path(weights).with_name("config.json")
        path = sibling if sibling.is_file() else None
    try:
        if path or os.environ.get(CONFIG_ENV) or fallback is None:
            cfg = load_config(path)
        else:
            cfg = fallback
    except FileNotFoundError as exc:
        raise UserError(f"config file not found: {exc.filename}") from exc
    except (ValueError, TypeError) as exc:
        raise UserError(f"bad config: {exc}") from exc
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "rho", None) is not None:
        if not 0.0 <= args.rho <= 1.0:
            raise UserError(f"--rho must lie in [0, 1], got {args.rho}")
        changes["rho"] = args.rho
    return cfg.replace(**changes) if changes else cfg


def _weights(args, cfg: PipelineConfig) -> MatcherWeights:
    if not args.weights:
        logger.warning("no --weights given; using random weights from seed %d", cfg.seed)
        return pipeline.init_weights(cfg)
    path = Path(args.weights)
    if not path.is_file():
        raise UserError(f"weights file not found: {path}")
    try:
        return pipeline.load_matcher_weights(path, cfg)
    except (ValueError, KeyError, OSError) as exc:
        raise UserError(f"cannot load weights {path}: {exc}") from exc


def _image(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"image not found: {p}")
    try:
        return pnm.read_image(p)
    except (pnm.PNMError, OSError) as exc:
        raise UserError(f"cannot read image {p}: {exc}") from exc


def _image_pair(args) -> tuple[np.ndarray, np.ndarray]:
    a, b = _image(args.image_a), _image(args.image_b)
    if a.shape != b.shape:
        raise UserError(f"image shapes differ: {a.shape} vs {b.shape}")
    try:
        backbone.check_image_shape(*a.shape[:2])
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    return a, b


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _forward(pair, weights, cfg) -> pipeline.MatchResult:
    try:
        return pipeline.forward(pair, weights, cfg)
    except pipeline.StageError as exc:
        raise InvariantError(str(exc)) from exc


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None


# ---------------------------------------------------------------- subcommands


def cmd_match(args) -> int:
    cfg = _config(args)
    pair = _image_pair(args)
    weights = _weights(args, cfg)
    out = _out_dir(args)
    res = _forward(pair, weights, cfg)
    m = res.matches
    keep = m.confidence >= args.min_confidence if len(m) else np.zeros(0, dtype=bool)
    kept = matching.FineMatchSet(m.coords_a[keep], m.coords_b[keep], m.offset[keep], m.confidence[keep], m.clamped[keep])
    matching.write_matches(out / "matches.txt", kept, pair[0].shape)
    if not args.no_overlay:
        canvas = pnm.side_by_side(*pair)
        shift = np.array([pair[0].shape[1], 0.0])
        for pa, pb in zip(kept.coords_a, kept.coords_b):
            pnm.draw_line(canvas, pa, pb + shift, (0, 255, 0))
        pnm.write_pnm(out / "overlay.ppm", canvas)
    print(f"{len(kept)} matches -> {out / 'matches.txt'}")
    return 0


def cmd_masks(args) -> int:
    cfg = _config(args)
    pair = _image_pair(args)
    weights = _weights(args, cfg)
    out = _out_dir(args)
    res = _forward(pair, weights, cfg)
    pnm.write_pnm(out / "pm_a.pgm", pnm.to_uint8(res.pm_a))
    pnm.write_pnm(out / "pm_b.pgm", pnm.to_uint8(res.pm_b))
    pnm.write_pnm(out / "cm_a.pgm", res.cm_a.mask.astype(np.uint8) * 255)
    pnm.write_pnm(out / "cm_b.pgm", res.cm_b.mask.astype(np.uint8) * 255)
    for side, cm in (("A", res.cm_a), ("B", res.cm_b)):
        if cm.degenerate:
            logger.warning("co-visible mask %s fell back to the full grid", side)
    print(f"masks ({res.pm_a.shape[0]}x{res.pm_a.shape[1]} grid) -> {out}")
    return 0


def _pair_dirs(paths) -> list[Path]:
    dirs = [Path(p) for p in paths]
    for d in dirs:
        if not (d / "homography.txt").is_file():
            raise UserError(f"not a pair directory (no homography.txt): {d}")
    return dirs


def _corner_error(d: Path, args, cfg, weights) -> float:
    H_gt = synth.read_homography(d / "homography.txt")
    if args.estimate:
        H_est = synth.read_homography(d / args.estimate)
    else:
        a, b = pnm.read_image(d / "img_a.pgm"), pnm.read_image(d / "img_b.pgm")
        res = _forward((a, b), weights, cfg)
        if len(res.matches) < 4:
            return math.inf
        H_est, _ = geometry.ransac_homography(
            res.matches.coords_a, res.matches.coords_b, args.ransac_threshold, args.ransac_iterations, cfg.seed
        )
        if H_est is None:
            return math.inf
    h, w = _pair_shape(d)
    return geometry.ccm(H_est, H_gt, w, h)


def _pair_shape(d: Path) -> tuple[int, int]:
    return pnm.read_image(d / "img_a.pgm").shape[:2]


def _report(kind: str, values: dict, errors: list[float], args) -> None:
    for k, v in values.items():
        print(f"{kind}@{k}: {v:.4f}")
    if args.out:
        out = _out_dir(args)
        _write_json(
            out / f"{kind}_report.json",
            {"kind": kind, "count": len(errors), "errors": [_finite_or_none(e) for e in errors], "values": {str(k): v for k, v in values.items()}},
        )


def cmd_eval_ccm(args) -> int:
    cfg = _config(args)
    dirs = _pair_dirs(args.pairs)
    needed = [args.estimate] if args.estimate else ["img_a.pgm", "img_b.pgm"]
    for d in dirs:
        for name in needed + ["img_a.pgm"]:
            if not (d / name).is_file():
                raise UserError(f"missing {d / name}")
    weights = None if args.estimate else _weights(args, cfg)
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        errors = list(pool.map(lambda d: _corner_error(d, args, cfg, weights), dirs))
    _report("ccm", geometry.ccm_fractions(errors), errors, args)
    return 0


def _read_errors(path: str) -> list[float]:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"error list not found: {p}")
    try:
        return [float(tok) for tok in p.read_text().split()]
    except ValueError as exc:
        raise UserError(f"{p}: {exc}") from exc


def cmd_eval_auc(args) -> int:
    errors = [e for path in args.errors for e in _read_errors(path)]
    if not errors:
        raise UserError("no pose errors given")
    if any(e < 0 or math.isnan(e) for e in errors):
        raise UserError("pose errors must be non-negative degrees (inf for failures)")
    _report("auc", geometry.pose_auc(errors), errors, args)
    return 0


def cmd_synth(args) -> int:
    if args.size % 8 or args.size < 16:
        raise UserError(f"--size must be a multiple of 8 and at least 16, got {args.size}")
    if args.count < 1:
        raise UserError("--count must be >= 1")
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    pairs = synth.synth_dataset(args.count, args.size, seed, args.kind, args.max_shift)
    for i, p in enumerate(pairs):
        synth.write_pair(out / f"pair_{i:04d}", p)
    print(f"{len(pairs)} pairs -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, fallback=PipelineConfig.toy())
    if args.steps < 1:
        raise UserError("--steps must be >= 1")
    if args.pairs:
        for d in _pair_dirs(args.pairs):
            if not (d / "gt.json").is_file():
                raise UserError(f"pair directory lacks gt.json: {d}")
        dataset = [synth.load_pair(d) for d in args.pairs]
    else:
        dataset = [synth.synth_pair(args.size, cfg.seed, (10.0, 6.0))]
    weights = _weights(args, cfg) if args.weights else None
    out = _out_dir(args)
    try:
        result = pipeline.train_toy(dataset, cfg, args.steps, args.lr, weights, log_every=args.log_every)
    except FloatingPointError as exc:
        raise InvariantError(str(exc)) from exc
    result.weights.save(out / "weights.json")
    save_config(cfg, out / "config.json")
    (out / "losses.txt").write_text("".join(f"{x:.9g}\n" for x in result.losses))
    print(f"loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f} over {args.steps} steps; weights -> {out / 'weights.json'}")
    return 0


def cmd_verify(args) -> int:
    results = verify.run_checks(args.fault)
    failed = [k for k, ok in results.items() if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} invariants hold")
    if failed:
        raise InvariantError("failed: " + ", ".join(failed))
    return 0


def cmd_dump_attention(args) -> int:
    cfg = _config(args)
    pair = _image_pair(args)
    weights = _weights(args, cfg)
    n_layers = 4 * len(weights.eitm)
    if not 0 <= args.layer < n_layers:
        raise UserError(f"--layer must be in [0, {n_layers - 1}], got {args.layer}")
    h, w = pair[0].shape
    kps = backbone.grid_keypoints(h, w)
    if not 0 <= args.query < len(kps):
        raise UserError(f"--query must be in [0, {len(kps) - 1}], got {args.query}")
    out = _out_dir(args)
    trace: list = []
    with pipeline.no_grad():
        pipeline.run(pair, weights, cfg, trace)
    layer, dst_seq, src_seq = trace[args.layer]
    weights_row = attention_weights(dst_seq[args.query : args.query + 1], src_seq, layer)[0]
    # role of each layer within a block: self A, self B, cross A<-B, cross B<-A
    dst_side, src_side = [("a", "a"), ("b", "b"), ("a", "b"), ("b", "a")][args.layer % 4]
    top = np.argsort(-weights_row, kind="stable")[:TOP_RAYS]
    canvas = pnm.side_by_side(*pair)
    offset = {"a": np.zeros(2), "b": np.array([w, 0.0])}
    peak = weights_row[top].max()
    for j in top[::-1]:
        level = int(round(255 * weights_row[j] / peak)) if peak > 0 else 255
        pnm.draw_line(canvas, kps[args.query] + offset[dst_side], kps[j] + offset[src_side], (level, level, 0))
    pnm.write_pnm(out / "attention.ppm", canvas)
    _write_json(
        out / "attention.json",
        {
            "layer": args.layer,
            "query": args.query,
            "query_xy": kps[args.query].tolist(),
            "image": dst_side,
            "attends_to": src_side,
            "top": [{"index": int(j), "xy": kps[j].tolist(), "weight": float(weights_row[j])} for j in top],
        },
    )
    print(f"top-{len(top)} attention rays -> {out / 'attention.ppm'}")
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, *, pipeline_flags: bool = True) -> None:
    p.add_argument("--config", help=f"config file (JSON); default ${CONFIG_ENV} or built-in defaults")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-pair work")
    p.add_argument("--out", default=".", help="output directory")
    if pipeline_flags:
        p.add_argument("--weights", help="weights manifest written by 'train'")
        p.add_argument("--rho", type=float, help="override the coarse-match threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oamatch", description="Overlap-aware detector-free feature matcher.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match two images and write a match file")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--min-confidence", type=float, default=0.0)
    p.add_argument("--no-overlay", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("masks", help="write probability maps and co-visible masks as PGMs")
    p.add_argument("image_a")
    p.add_argument("image_b")
    _common(p)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("eval-ccm", help="corner-error accuracy over synthetic pair directories")
    p.add_argument("pairs", nargs="+")
    p.add_argument("--estimate", help="use this homography file inside each pair directory instead of matching")
    p.add_argument("--ransac-threshold", type=float, default=3.0)
    p.add_argument("--ransac-iterations", type=int, default=1000)
    _common(p)
    p.set_defaults(func=cmd_eval_ccm, out=None)

    p = sub.add_parser("eval-auc", help="pose-error AUC from files of angular errors (degrees)")
    p.add_argument("errors", nargs="+")
    _common(p, pipeline_flags=False)
    p.set_defaults(func=cmd_eval_auc, out=None)

    p = sub.add_parser("synth", help="generate synthetic pairs with exact ground truth")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--kind", choices=("translation", "homography"), default="translation")
    p.add_argument("--max-shift", type=float, default=12.0)
    _common(p, pipeline_flags=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="overfit a toy model on synthetic pairs")
    p.add_argument("pairs", nargs="*", help="pair directories; default: one generated 64x64 pair")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--log-every", type=int, default=50)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--fault", help=argparse.SUPPRESS)
    _common(p, pipeline_flags=False)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dump-attention", help="draw the strongest attention rays of one query keypoint")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--layer", type=int, default=0, help="index over encoder layers (4 per block)")
    p.add_argument("--query", type=int, default=0, help="row-major keypoint index")
    _common(p)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; those are user errors here
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
