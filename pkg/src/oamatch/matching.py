"""Coarse match proposal and window-based offset/confidence refinement."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .attention import Block, init_blocks, interleave
from .tensor import DimensionError, Tensor, concat, gelu, index, max_, pad, reshape, sigmoid, transpose


@dataclass
class CoarseMatchSet:
    pairs: np.ndarray  # T×2 indices into the co-visible keypoint lists
    coords_a: np.ndarray  # T×2 pixels
    coords_b: np.ndarray
    confidence: np.ndarray  # assignment value per pair

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class FineMatchSet:
    coords_a: np.ndarray
    coords_b: np.ndarray
    offset: np.ndarray
    confidence: np.ndarray
    clamped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.coords_a)


@dataclass
class RefinementParams:
    blocks: list[Block]
    trunk1_w: Tensor
    trunk1_b: Tensor
    trunk2_w: Tensor
    trunk2_b: Tensor
    trunk3_w: Tensor
    trunk3_b: Tensor
    trunk4_w: Tensor
    trunk4_b: Tensor
    offset_w: Tensor
    offset_b: Tensor
    conf_w: Tensor
    conf_b: Tensor


def init_refinement(rng: np.random.Generator, n_blocks: int, c_fine: int, gamma: int) -> RefinementParams:
    c1 = 2 * c_fine

    def lin(n_in, n_out):
        return nn.he_normal(rng, (n_in, n_out), n_in), nn.zeros(n_out)

    t1, t2, t3, t4 = (lin(c1, c1) for _ in range(4))
    return RefinementParams(
        blocks=init_blocks(rng, n_blocks, c_fine, gamma, use_depthwise=False),
        trunk1_w=t1[0], trunk1_b=t1[1],
        trunk2_w=t2[0], trunk2_b=t2[1],
        trunk3_w=t3[0], trunk3_b=t3[1],
        trunk4_w=t4[0], trunk4_b=t4[1],
        offset_w=nn.zeros((c1, 2)), offset_b=nn.zeros(2),
        conf_w=nn.param(rng.standard_normal((c1, 1)) * 0.01), conf_b=nn.zeros(1),
    )


def propose_coarse(g: np.ndarray, rho: float) -> np.ndarray:
    """Pairs (i, j) with g[i, j] > rho that are the unique maximum of their row and column."""
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    if g.size == 0:
        return np.zeros((0, 2), dtype=np.intp)
    row_max = g == g.max(axis=1, keepdims=True)
    col_max = g == g.max(axis=0, keepdims=True)
    row_max &= row_max.sum(axis=1, keepdims=True) == 1
    col_max &= col_max.sum(axis=0, keepdims=True) == 1
    keep = row_max & col_max & (g > rho)
    return np.argwhere(keep).astype(np.intp)


def coarse_to_keypoints(pairs: np.ndarray, kps_a: np.ndarray, kps_b: np.ndarray, g=None) -> CoarseMatchSet:
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) and (
        pairs.min() < 0 or pairs[:, 0].max() >= len(kps_a) or pairs[:, 1].max() >= len(kps_b)
    ):
        raise IndexError(f"match index out of range for {len(kps_a)}/{len(kps_b)} keypoints")
    conf = np.zeros(len(pairs)) if g is None else np.asarray(g.data if isinstance(g, Tensor) else g)[pairs[:, 0], pairs[:, 1]]
    return CoarseMatchSet(pairs, kps_a[pairs[:, 0]], kps_b[pairs[:, 1]], conf)


def fine_index(coords: np.ndarray) -> np.ndarray:
    """Fine-grid (1/2 resolution) cell of pixel coordinates: round(p/2 - 0.5) with halves rounded up."""
    return np.floor(np.asarray(coords, dtype=np.float64) / 2.0).astype(np.intp)


def crop_windows(fine: Tensor, coords: np.ndarray, w: int) -> Tensor:
    """w×w windows of a C×h×w fine map around each (x, y) pixel, zero-padded, as T×w²×C."""
    if w % 2 != 1:
        raise ValueError(f"window size must be odd, got {w}")
    c = fine.shape[0]
    r = w // 2
    idx = fine_index(coords).reshape(-1, 2)
    offs = np.arange(-r, r + 1)
    cols = idx[:, 0, None] + offs + r  # into the padded map
    rows = idx[:, 1, None] + offs + r
    padded = pad(fine, ((0, 0), (r, r), (r, r)))
    win = index(padded, (slice(None), rows[:, :, None], cols[:, None, :]))  # C×T×w×w
    t = len(idx)
    return reshape(transpose(win, (1, 2, 3, 0)), (t, w * w, c))


def refine(win_a: Tensor, win_b: Tensor, params: RefinementParams) -> tuple[Tensor, Tensor]:
    """Offsets (T×2, pixels) and confidences (T,) for T window pairs."""
    if win_a.shape != win_b.shape or win_a.ndim != 3:
        raise DimensionError(f"window batches differ: {win_a.shape} vs {win_b.shape}")
    if win_a.shape[0] == 0:
        raise ValueError("refine needs at least one match")
    fa, fb = interleave(win_a, win_b, params.blocks)
    x = concat([fa, fb], axis=-1)  # T×w²×2C
    x = gelu(nn.linear(x, params.trunk1_w, params.trunk1_b))
    x = gelu(nn.linear(x, params.trunk2_w, params.trunk2_b))
    # global max-pool over the window; keeping the singleton axis makes every later
    # product per-match, so a match's result does not depend on the batch size
    x = max_(x, axis=1, keepdims=True)
    x = gelu(nn.linear(x, params.trunk3_w, params.trunk3_b))
    x = gelu(nn.linear(x, params.trunk4_w, params.trunk4_b))
    theta = nn.linear(x, params.offset_w, params.offset_b)
    conf = sigmoid(nn.linear(x, params.conf_w, params.conf_b))
    return reshape(theta, (theta.shape[0], 2)), reshape(conf, (conf.shape[0],))


def fine_matches(coarse: CoarseMatchSet, theta, conf, image_shape: tuple[int, int]) -> FineMatchSet:
    """Shift second-image points by the offsets; points leaving the image are clamped and flagged."""
    theta = np.asarray(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64).reshape(-1, 2)
    conf = np.asarray(conf.data if isinstance(conf, Tensor) else conf, dtype=np.float64).reshape(-1)
    if len(theta) != len(coarse) or len(conf) != len(coarse):
        raise DimensionError(f"{len(coarse)} coarse matches vs {len(theta)} offsets / {len(conf)} confidences")
    h, w = image_shape
    raw = coarse.coords_b + theta
    clipped = np.stack([np.clip(raw[:, 0], 0.0, w), np.clip(raw[:, 1], 0.0, h)], axis=1) if len(raw) else raw
    clamped = np.any(clipped != raw, axis=1) if len(raw) else np.zeros(0, dtype=bool)
    return FineMatchSet(coarse.coords_a.copy(), clipped, theta, conf, clamped)


def empty_fine_matches() -> FineMatchSet:
    z = np.zeros((0, 2))
    return FineMatchSet(z, z.copy(), z.copy(), np.zeros(0), np.zeros(0, dtype=bool))


def format_matches(matches: FineMatchSet, image_shape: tuple[int, int]) -> str:
    h, w = image_shape
    lines = [f"# width={w} height={h} count={len(matches)}"]
    for (x1, y1), (x2, y2), c in zip(matches.coords_a, matches.coords_b, matches.confidence):
        lines.append(f"{x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f} {c:.6f}")
    return "\n".join(lines) + "\n"


def write_matches(path: str | Path, matches: FineMatchSet, image_shape: tuple[int, int]) -> None:
    Path(path).write_text(format_matches(matches, image_shape))


def read_matches(path: str | Path) -> tuple[np.ndarray, tuple[int, int]]:
    """Return (T×5 array, (height, width))."""
    lines = Path(path).read_text().splitlines()
    header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    rows = [list(map(float, ln.split())) for ln in lines[1:] if ln.strip()]
    return np.array(rows, dtype=np.float64).reshape(-1, 5), (int(header["height"]), int(header["width"]))
