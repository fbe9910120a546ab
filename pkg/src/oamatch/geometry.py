"""Two-view geometry: depth warping, homography fitting and the evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateConfiguration(ValueError):
    pass


@dataclass
class CameraFrame:
    K: np.ndarray  # 3×3 intrinsics
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray  # world-to-camera translation
    depth: np.ndarray  # H×W metres, 0 = invalid

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if np.any(np.tril(self.K, -1) != 0) or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def relative_pose(frame_a: CameraFrame, frame_b: CameraFrame) -> tuple[np.ndarray, np.ndarray]:
    r = frame_b.R @ frame_a.R.T
    return r, frame_b.t - r @ frame_a.t


def sample_depth(depth: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Nearest-pixel depth at (x, y) points; pixel i spans [i, i+1)."""
    h, w = depth.shape
    cols = np.floor(points[:, 0]).astype(np.intp)
    rows = np.floor(points[:, 1]).astype(np.intp)
    inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    z = np.zeros(len(points))
    z[inside] = depth[rows[inside], cols[inside]]
    return z


def warp_with_depth(points: np.ndarray, frame_a: CameraFrame, frame_b: CameraFrame):
    """Project pixels of image A into image B; returns (points_b, valid)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    z = sample_depth(frame_a.depth, points)
    r, t = relative_pose(frame_a, frame_b)
    same_camera = (
        np.array_equal(frame_a.R, frame_b.R) and np.array_equal(frame_a.t, frame_b.t)
    ) or (np.array_equal(r, np.eye(3)) and not np.any(t))
    if same_camera and np.array_equal(frame_a.K, frame_b.K):
        proj, z_b = points.copy(), z
    else:
        homog = np.concatenate([points, np.ones((len(points), 1))], axis=1)
        cam_a = np.linalg.solve(frame_a.K, homog.T) * z  # 3×N
        cam_b = r @ cam_a + t[:, None]
        z_b = cam_b[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = frame_b.K @ cam_b
            proj = (pix[:2] / pix[2]).T
    h, w = frame_b.shape
    valid = (z > 0) & (z_b > 0) & np.all(np.isfinite(proj), axis=1)
    valid &= (proj[:, 0] >= 0) & (proj[:, 0] < w) & (proj[:, 1] >= 0) & (proj[:, 1] < h)
    return proj, valid


# ---------------------------------------------------------------- homographies


def apply_homography(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    p = np.concatenate([points, np.ones((len(points), 1))], axis=1) @ np.asarray(H).T
    return p[:, :2] / p[:, 2:3]


def normalize_homography(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    return H / H[2, 2] if H[2, 2] != 0 else H


def _hartley(points: np.ndarray) -> np.ndarray:
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    if d == 0:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def estimate_homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography src -> dst by normalised DLT."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 4 or len(src) != len(dst):
        raise DegenerateConfiguration(f"need >= 4 correspondences, got {len(src)}/{len(dst)}")
    ts, td = _hartley(src), _hartley(dst)
    s = apply_homography(ts, src)
    d = apply_homography(td, dst)
    n = len(s)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1
    A[1::2, 6:8] = -d[:, 1:2] * s
    A[1::2, 8] = -d[:, 1]
    _, sv, vt = np.linalg.svd(A)
    # a unique solution needs a one-dimensional null space
    if sv[7] < 1e-8 * sv[0]:
        raise DegenerateConfiguration("correspondences are rank-deficient (collinear points?)")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.solve(td, Hn @ ts)
    if abs(np.linalg.det(H)) < 1e-12 * max(abs(H).max() ** 3, 1e-300):
        raise DegenerateConfiguration("estimated homography is singular")
    return normalize_homography(H)


def ransac_homography(src, dst, threshold: float = 3.0, iterations: int = 1000, seed: int = 0):
    """Returns (H or None, inlier mask).  H is None when fewer than 4 inliers are found."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    best = np.zeros(n, dtype=bool)
    if n < 4:
        return None, best
    rng = np.random.default_rng(seed)

    def inliers_of(H):
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.linalg.norm(apply_homography(H, src) - dst, axis=1)
        return np.nan_to_num(err, nan=np.inf) < threshold

    for _ in range(iterations):
        sample = rng.choice(n, 4, replace=False)
        try:
            H = estimate_homography_dlt(src[sample], dst[sample])
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            continue
        inl = inliers_of(H)
        if inl.sum() > best.sum():
            best = inl
            if best.all():
                break
    if best.sum() < 4:
        return None, best
    try:
        H = estimate_homography_dlt(src[best], dst[best])
    except DegenerateConfiguration:
        return None, best
    return H, inliers_of(H)


def image_corners(width: int, height: int) -> np.ndarray:
    return np.array([[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]], dtype=np.float64)


def ccm(H_est: np.ndarray, H_gt: np.ndarray, width: int, height: int) -> float:
    """Mean distance between the four image corners warped by each homography."""
    corners = image_corners(width, height)
    return float(np.linalg.norm(apply_homography(H_est, corners) - apply_homography(H_gt, corners), axis=1).mean())


def ccm_fractions(errors, thresholds=(1, 3, 5)) -> dict[int, float]:
    errors = np.asarray(errors, dtype=np.float64)
    return {t: float(np.mean(errors < t)) for t in thresholds}


# ---------------------------------------------------------------- pose AUC


def pose_auc(errors, thresholds=(5, 10, 20)) -> dict:
    """Area under the recall-vs-error curve up to each threshold, divided by it.

    The curve linearly interpolates (0, 0) and (e_k, k/n) over the sorted
    errors and is held flat after the last error below the threshold.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("pose_auc needs at least one error")
    if np.any(errors < 0) or np.any(np.isnan(errors)):
        raise ValueError("errors must be non-negative (use inf for failures)")
    errors = np.sort(errors)
    recall = (np.arange(errors.size) + 1) / errors.size
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    out = {}
    for t in thresholds:
        last = np.searchsorted(errors, t)
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        e = np.concatenate([errors[:last], [t]])
        out[t] = float(np.trapezoid(r, x=e) / t)
    return out


def rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    cos = (np.trace(np.asarray(R_est).T @ np.asarray(R_gt)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
