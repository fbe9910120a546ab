"""Co-visible area prediction from the soft assignment matrix.

Probability maps come from the row/column maxima of the dual-softmax
assignment.  They are binarised at an adaptive threshold (the area under the
sorted-value curve), closed morphologically, and reduced to the single
largest hole-free region.  Everything after the assignment is discrete and
carries no gradient.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import DimensionError, Tensor, matmul, softmax, transpose

logger = logging.getLogger(__name__)


class DegenerateOverlap(RuntimeError):
    """Raised when a co-visible mask selects no keypoints."""


class AssignmentMatrix(NamedTuple):
    scores: Tensor
    assignment: Tensor


@dataclass
class CoVisibleMask:
    mask: np.ndarray  # bool, coarse grid
    indices: np.ndarray  # row-major indices of foreground cells, ascending
    degenerate: bool = False


def score_and_assign(fa: Tensor, fb: Tensor) -> AssignmentMatrix:
    """Inner-product scores and their row-softmax ⊙ column-softmax."""
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise DimensionError(f"descriptor shapes differ: {fa.shape} vs {fb.shape}")
    s = matmul(fa, transpose(fb))
    g = softmax(s, axis=1) * softmax(s, axis=0)
    return AssignmentMatrix(s, g)


def probability_maps(g: np.ndarray, grid_a: tuple[int, int], grid_b: tuple[int, int] | None = None):
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    grid_b = grid_b or grid_a
    return g.max(axis=1).reshape(grid_a), g.max(axis=0).reshape(grid_b)


def adaptive_threshold(pm: np.ndarray) -> float:
    """Area under the curve of sorted map values against abscissae k/N.

    With a rectangle rule of width 1/N this is exactly the mean value.
    """
    vals = np.sort(np.asarray(pm, dtype=np.float64).ravel())
    if vals.size == 0:
        raise ValueError("empty probability map")
    return float(np.sum(vals) * (1.0 / vals.size))


def binarize(pm: np.ndarray, lam: float) -> np.ndarray:
    return np.asarray(pm) >= lam


def _box_count(mask: np.ndarray, k: int, outside: int) -> np.ndarray:
    """Number of set cells in the k×k window anchored at (k//2, k//2) around each cell."""
    lo = k // 2
    hi = k - 1 - lo
    padded = np.pad(mask.astype(np.int64), ((lo, hi), (lo, hi)), constant_values=outside)
    c = np.pad(padded.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    h, w = mask.shape
    return c[k : k + h, k : k + w] - c[:h, k : k + w] - c[k : k + h, :w] + c[:h, :w]


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    # dilation by B reflects the window: cell x sees x - B
    flipped = mask[::-1, ::-1]
    return (_box_count(flipped, k, 0) > 0)[::-1, ::-1]


def erode(mask: np.ndarray, k: int) -> np.ndarray:
    """Erosion where cells outside the grid count as foreground (neutral border)."""
    mask = np.asarray(mask, dtype=bool)
    return _box_count(mask, k, 1) == k * k


def morph_close(mask: np.ndarray, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError(f"kernel size must be >= 1, got {k}")
    return erode(dilate(mask, k), k)


_NEIGHBOURS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def _components(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """4-connected foreground components in row-major discovery order."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            comp = []
            seen[r0, c0] = True
            queue = deque([(r0, c0)])
            while queue:
                r, c = queue.popleft()
                comp.append((r, c))
                for dr, dc in _NEIGHBOURS:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
            comps.append(comp)
    return comps


def border_reachable(background: np.ndarray) -> np.ndarray:
    """Background cells 4-connected to the grid border."""
    h, w = background.shape
    reached = np.zeros_like(background, dtype=bool)
    queue = deque()
    for r in range(h):
        for c in range(w):
            if (r in (0, h - 1) or c in (0, w - 1)) and background[r, c]:
                reached[r, c] = True
                queue.append((r, c))
    while queue:
        r, c = queue.popleft()
        for dr, dc in _NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and background[rr, cc] and not reached[rr, cc]:
                reached[rr, cc] = True
                queue.append((rr, cc))
    return reached


def fill_holes(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return ~border_reachable(~mask)


def max_contour_fill(mask: np.ndarray) -> CoVisibleMask:
    """Keep the component whose filled outline covers the most cells, holes filled."""
    mask = np.asarray(mask, dtype=bool)
    best = None
    best_area = 0
    for comp in _components(mask):
        single = np.zeros_like(mask)
        rows, cols = zip(*comp)
        single[rows, cols] = True
        filled = fill_holes(single)
        area = int(filled.sum())
        if area > best_area:
            best, best_area = filled, area
    if best is None:
        return CoVisibleMask(np.zeros_like(mask), np.zeros(0, dtype=np.intp), degenerate=True)
    return CoVisibleMask(best, np.flatnonzero(best.ravel()))


def covisible_mask(pm: np.ndarray, k: int) -> CoVisibleMask:
    """Threshold, close and fill one probability map; an empty result falls back to the whole grid."""
    om = binarize(pm, adaptive_threshold(pm))
    cm = max_contour_fill(morph_close(om, k))
    if cm.degenerate:
        logger.warning("co-visible mask is empty; falling back to the entire image")
        full = np.ones_like(cm.mask, dtype=bool)
        return CoVisibleMask(full, np.arange(full.size), degenerate=True)
    return cm


def select_covisible(features: Tensor, keypoints: np.ndarray, cm: CoVisibleMask):
    """Gather keypoints and descriptor rows of foreground cells, in row-major order."""
    if cm.mask.size != features.shape[0] or len(keypoints) != features.shape[0]:
        raise DimensionError(f"mask with {cm.mask.size} cells vs {features.shape[0]} features")
    idx = np.flatnonzero(np.asarray(cm.mask).ravel())
    if idx.size == 0:
        raise DegenerateOverlap("co-visible mask selects no keypoints")
    return keypoints[idx], features[idx], idx
