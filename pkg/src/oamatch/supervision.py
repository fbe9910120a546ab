"""Ground-truth match labels, label confidences and the training losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import GRID
from .geometry import CameraFrame, warp_with_depth
from .tensor import Tensor, as_tensor, clamp, index, log, square, sum_

LOG_EPS = 1e-6

Warp = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class SupervisionWarning(UserWarning):
    """A loss term or label row was degenerate and has been dropped or zeroed."""


@dataclass
class GroundTruthLabels:
    gt: np.ndarray  # N_a×N_b, {0, 1}
    proj_ab: np.ndarray
    valid_ab: np.ndarray
    proj_ba: np.ndarray
    valid_ba: np.ndarray


@dataclass
class LossBundle:
    entire: Tensor
    overlap: Tensor
    offset: Tensor
    confidence: Tensor
    alpha: tuple[float, float, float, float] = (1.0, 1.0, 0.2, 0.2)

    def components(self) -> dict[str, float]:
        return {
            "entire": self.entire.item(),
            "overlap": self.overlap.item(),
            "offset": self.offset.item(),
            "confidence": self.confidence.item(),
        }


# ---------------------------------------------------------------- label confidence


def label_confidence(point, corners, kappa: float = 0.01):
    """Probabilities for the two corners nearest to ``point``.

    Scores are (d_max - d) / kappa for the two closest corners (ties broken by
    corner order), normalised with a softmax.  Returns (positions, probs),
    positions indexing ``corners``.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    d = np.linalg.norm(np.asarray(corners, dtype=np.float64) - np.asarray(point, dtype=np.float64), axis=1)
    near = np.argsort(d, kind="stable")[:2]
    scores = (d.max() - d[near]) / kappa
    e = np.exp(scores - scores.max())
    return near, e / e.sum()


def cell_corners(point, grid: tuple[int, int]):
    """Indices and coordinates of the four keypoints framing ``point``, or None outside them."""
    rows, cols = grid
    half = GRID / 2
    x, y = float(point[0]), float(point[1])
    x_max = GRID * (cols - 1) + half
    y_max = GRID * (rows - 1) + half
    if rows < 2 or cols < 2 or not (half <= x <= x_max and half <= y <= y_max):
        return None
    c0 = min(int(np.floor((x - half) / GRID)), cols - 2)
    r0 = min(int(np.floor((y - half) / GRID)), rows - 2)
    cells = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)]
    idx = np.array([r * cols + c for r, c in cells])
    xy = np.array([[GRID * c + half, GRID * r + half] for r, c in cells], dtype=np.float64)
    return idx, xy


def confidence_rows(proj: np.ndarray, valid: np.ndarray, n_src: int, grid_dst: tuple[int, int], kappa: float):
    """One-directional confidence matrix: each valid row holds two probabilities summing to one."""
    out = np.zeros((n_src, grid_dst[0] * grid_dst[1]))
    n_outside = 0
    for i in range(n_src):
        if not valid[i]:
            continue
        found = cell_corners(proj[i], grid_dst)
        if found is None:
            n_outside += 1
            continue
        idx, xy = found
        near, probs = label_confidence(proj[i], xy, kappa)
        out[i, idx[near]] = probs
    if n_outside:
        warnings.warn(f"{n_outside} projections fall outside the keypoint grid; rows zeroed", SupervisionWarning)
    return out


def nearest_cell(points: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Row-major index of the grid cell containing each point (its centre is the nearest keypoint)."""
    rows, cols = grid
    c = np.clip(np.floor(points[:, 0] / GRID).astype(np.intp), 0, cols - 1)
    r = np.clip(np.floor(points[:, 1] / GRID).astype(np.intp), 0, rows - 1)
    return r * cols + c


def make_gt_from_warps(
    kps_a: np.ndarray,
    kps_b: np.ndarray,
    warp_ab: Warp,
    warp_ba: Warp,
    grid_a: tuple[int, int],
    grid_b: tuple[int, int],
    kappa: float = 0.01,
):
    proj_ab, valid_ab = warp_ab(kps_a)
    proj_ba, valid_ba = warp_ba(kps_b)
    na, nb = len(kps_a), len(kps_b)
    nn_ab = nearest_cell(proj_ab, grid_b)
    nn_ba = nearest_cell(proj_ba, grid_a)
    gt = np.zeros((na, nb))
    for i in range(na):
        j = nn_ab[i]
        if valid_ab[i] and valid_ba[j] and nn_ba[j] == i:
            gt[i, j] = 1.0
    lc_a = confidence_rows(proj_ab, valid_ab, na, grid_b, kappa)
    lc_b = confidence_rows(proj_ba, valid_ba, nb, grid_a, kappa)
    # lc_b is indexed (B keypoint, A keypoint); transpose to share G's layout
    lc = (lc_a + lc_b.T) / 2.0
    return GroundTruthLabels(gt, proj_ab, valid_ab, proj_ba, valid_ba), lc


def make_gt_and_confidence(
    kps_a: np.ndarray,
    kps_b: np.ndarray,
    frame_a: CameraFrame,
    frame_b: CameraFrame,
    kappa: float = 0.01,
):
    grid_a = (frame_a.shape[0] // GRID, frame_a.shape[1] // GRID)
    grid_b = (frame_b.shape[0] // GRID, frame_b.shape[1] // GRID)
    return make_gt_from_warps(
        kps_a,
        kps_b,
        lambda p: warp_with_depth(p, frame_a, frame_b),
        lambda p: warp_with_depth(p, frame_b, frame_a),
        grid_a,
        grid_b,
        kappa,
    )


# ---------------------------------------------------------------- losses


def _zero() -> Tensor:
    return Tensor(0.0)


def loss_entire(g: Tensor, gt: np.ndarray, lc: np.ndarray, eps: float = LOG_EPS) -> Tensor:
    """Confidence-weighted BCE: positives averaged over G^gt = 1, negatives over G^gt = 0."""
    g = as_tensor(g)
    gt = np.asarray(gt)
    lc = np.asarray(lc, dtype=np.float64)
    if g.shape != gt.shape or gt.shape != lc.shape:
        raise ValueError(f"shape mismatch: G {g.shape}, labels {gt.shape}, confidences {lc.shape}")
    gc = clamp(g, eps, 1.0 - eps)
    pos = gt == 1
    neg = ~pos
    total = _zero()
    if pos.any():
        total = total - sum_(log(gc) * (lc * pos)) * (1.0 / pos.sum())
    else:
        warnings.warn("no positive labels; positive term dropped", SupervisionWarning)
    if neg.any():
        total = total - sum_(log(1.0 - gc) * ((1.0 - lc) * neg)) * (1.0 / neg.sum())
    return total


def loss_overlap(g_oa: Tensor, idx_a, idx_b, gt: np.ndarray, lc: np.ndarray, eps: float = LOG_EPS) -> Tensor:
    ia, ib = np.asarray(idx_a, dtype=np.intp), np.asarray(idx_b, dtype=np.intp)
    return loss_entire(g_oa, np.asarray(gt)[np.ix_(ia, ib)], np.asarray(lc)[np.ix_(ia, ib)], eps)


def offset_keep(theta_gt: np.ndarray, eta: float) -> np.ndarray:
    """Matches whose target offset is within eta in the infinity norm."""
    theta_gt = np.asarray(theta_gt, dtype=np.float64).reshape(-1, 2)
    return np.abs(theta_gt).max(axis=1) <= eta


def loss_offset(theta: Tensor, theta_gt: np.ndarray, eta: float = 8.0) -> Tensor:
    theta = as_tensor(theta)
    theta_gt = np.asarray(theta_gt, dtype=np.float64).reshape(-1, 2)
    keep = offset_keep(theta_gt, eta)
    if not keep.any():
        warnings.warn("no matches within the offset threshold; offset loss is zero", SupervisionWarning)
        return _zero()
    kept = np.flatnonzero(keep)
    sq = square(theta_gt[kept] - index(theta, kept))
    return sum_(sq) * (1.0 / kept.size)


def loss_confidence(c: Tensor, c_gt: np.ndarray, eps: float = LOG_EPS) -> Tensor:
    c = as_tensor(c)
    c_gt = np.asarray(c_gt, dtype=np.float64).reshape(-1)
    if c_gt.size == 0:
        warnings.warn("no matches; confidence loss is zero", SupervisionWarning)
        return _zero()
    cc = clamp(c, eps, 1.0 - eps)
    bce = log(cc) * c_gt + log(1.0 - cc) * (1.0 - c_gt)
    return sum_(bce) * (-1.0 / c_gt.size)


def total_loss(bundle: LossBundle) -> Tensor:
    a1, a2, a3, a4 = bundle.alpha
    return bundle.entire * a1 + bundle.overlap * a2 + bundle.offset * a3 + bundle.confidence * a4
