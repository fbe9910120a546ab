"""Synthetic image pairs with exact ground truth.

Images are sampled from a continuous blob texture at pixel centres, so the
second view is rendered exactly for any homography, including subpixel
shifts.  Translation pairs also carry fronto-parallel camera frames with a
constant-depth scene, which yields the same warp through the depth route.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraFrame, apply_homography, warp_with_depth
from .pnm import read_image, read_pnm, to_uint8, write_pnm

FOCAL = 100.0
DEPTH = 2.0
DEPTH_SCALE = 0.001  # metres per stored unit in 16-bit depth PGMs


@dataclass
class BlobTexture:
    centers: np.ndarray  # M×2
    sigmas: np.ndarray
    amps: np.ndarray

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x, dtype=np.float64)
        for (cx, cy), s, a in zip(self.centers, self.sigmas, self.amps):
            out += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * s * s))
        return 0.5 + 0.5 * np.tanh(out)


def random_texture(rng: np.random.Generator, size: int, margin: float) -> BlobTexture:
    lo, hi = -margin, size + margin
    n = int(((hi - lo) / 5.0) ** 2)
    return BlobTexture(
        centers=rng.uniform(lo, hi, size=(n, 2)),
        sigmas=rng.uniform(1.5, 4.0, size=n),
        amps=rng.uniform(-1.5, 1.5, size=n),
    )


def render(texture: BlobTexture, size: int, H_inv: np.ndarray | None = None) -> np.ndarray:
    """Sample the texture at pixel centres, optionally through an inverse warp."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if H_inv is not None:
        pts = apply_homography(H_inv, np.stack([xs.ravel(), ys.ravel()], axis=1))
        xs, ys = pts[:, 0].reshape(size, size), pts[:, 1].reshape(size, size)
    return texture(xs, ys)


@dataclass
class SyntheticPair:
    img_a: np.ndarray
    img_b: np.ndarray
    homography: np.ndarray  # maps A pixels to B pixels
    frame_a: CameraFrame | None = None
    frame_b: CameraFrame | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.img_a.shape

    def _homography_warp(self, H, points):
        proj = apply_homography(H, points)
        h, w = self.shape
        valid = (proj[:, 0] >= 0) & (proj[:, 0] < w) & (proj[:, 1] >= 0) & (proj[:, 1] < h)
        return proj, valid

    def warp_ab(self, points):
        if self.frame_a is not None:
            return warp_with_depth(points, self.frame_a, self.frame_b)
        return self._homography_warp(self.homography, points)

    def warp_ba(self, points):
        if self.frame_a is not None:
            return warp_with_depth(points, self.frame_b, self.frame_a)
        return self._homography_warp(np.linalg.inv(self.homography), points)


def translation_frames(size: int, dx: float, dy: float, depth: float = DEPTH, focal: float = FOCAL):
    """Fronto-parallel frames of a constant-depth plane so that A pixels move by (dx, dy) in B."""
    K = np.array([[focal, 0.0, size / 2], [0.0, focal, size / 2], [0.0, 0.0, 1.0]])
    dmap = np.full((size, size), depth)
    fa = CameraFrame(K, np.eye(3), np.zeros(3), dmap)
    fb = CameraFrame(K, np.eye(3), np.array([dx * depth / focal, dy * depth / focal, 0.0]), dmap.copy())
    return fa, fb


def synth_pair(size: int, seed: int, translation=(8.0, 0.0), rotation_deg: float = 0.0) -> SyntheticPair:
    if size % 8:
        raise ValueError(f"size {size} is not divisible by 8")
    rng = np.random.default_rng(seed)
    dx, dy = map(float, translation)
    texture = random_texture(rng, size, margin=abs(dx) + abs(dy) + size * 0.5)
    c = size / 2
    th = np.radians(rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1.0]])
    to_c = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    from_c = np.array([[1, 0, c + dx], [0, 1, c + dy], [0, 0, 1.0]])
    H = from_c @ rot @ to_c
    img_a = render(texture, size)
    img_b = render(texture, size, np.linalg.inv(H))
    frames = translation_frames(size, dx, dy) if rotation_deg == 0.0 else (None, None)
    return SyntheticPair(img_a, img_b, H, *frames)


def synth_dataset(count: int, size: int, seed: int, kind: str = "translation", max_shift: float = 12.0):
    """``count`` pairs; kind 'translation' (depth frames) or 'homography' (rotation + shift)."""
    if kind not in ("translation", "homography"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        dx, dy = rng.uniform(-max_shift, max_shift, size=2)
        rot = float(rng.uniform(-10.0, 10.0)) if kind == "homography" else 0.0
        pairs.append(synth_pair(size, int(rng.integers(2**31)), (dx, dy), rot))
    return pairs


# ---------------------------------------------------------------- files


def _frame_dict(frame: CameraFrame, depth_name: str) -> dict:
    pose = np.concatenate([frame.R, frame.t[:, None]], axis=1)
    return {"intrinsics": frame.K.tolist(), "pose": pose.tolist(), "depth": depth_name, "depth_scale": DEPTH_SCALE}


def format_homography(H: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(H).ravel()) + "\n"


def read_homography(path: str | Path) -> np.ndarray:
    vals = [float(v) for v in Path(path).read_text().split()]
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 numbers, got {len(vals)}")
    return np.array(vals).reshape(3, 3)


def write_pair(directory: str | Path, pair: SyntheticPair) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pnm(d / "img_a.pgm", to_uint8(pair.img_a))
    write_pnm(d / "img_b.pgm", to_uint8(pair.img_b))
    (d / "homography.txt").write_text(format_homography(pair.homography))
    bundle = {"image_a": "img_a.pgm", "image_b": "img_b.pgm", "homography": "homography.txt"}
    if pair.frame_a is not None:
        for tag, frame in (("a", pair.frame_a), ("b", pair.frame_b)):
            name = f"depth_{tag}.pgm"
            write_pnm(d / name, np.rint(frame.depth / DEPTH_SCALE).astype(np.int64), maxval=65535)
            bundle[f"frame_{tag}"] = _frame_dict(frame, name)
    (d / "gt.json").write_text(json.dumps(bundle, indent=1) + "\n")


def _load_frame(d: Path, spec: dict) -> CameraFrame:
    pose = np.asarray(spec["pose"], dtype=np.float64)
    raw, _ = read_pnm(d / spec["depth"])
    return CameraFrame(spec["intrinsics"], pose[:, :3], pose[:, 3], raw.astype(np.float64) * float(spec["depth_scale"]))


def load_pair(directory: str | Path) -> SyntheticPair:
    d = Path(directory)
    bundle = json.loads((d / "gt.json").read_text())
    frames = (None, None)
    if "frame_a" in bundle:
        frames = (_load_frame(d, bundle["frame_a"]), _load_frame(d, bundle["frame_b"]))
    return SyntheticPair(
        read_image(d / bundle["image_a"]),
        read_image(d / bundle["image_b"]),
        read_homography(d / bundle["homography"]),
        *frames,
    )
