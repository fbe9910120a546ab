"""Binary PGM (P5) / PPM (P6) reading and writing, plus simple overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    toks: list[bytes] = []
    pos = 0
    n = len(data)
    while len(toks) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise PNMError("truncated header")
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        toks.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return toks, pos + 1


def decode_pnm(data: bytes) -> tuple[np.ndarray, int]:
    """Decode P5/P6 bytes to an integer array (H×W or H×W×3) and its maxval."""
    toks, pos = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r}; only binary P5/P6 are read")
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PNMError("malformed header") from None
    if not 0 < maxval < 65536 or width <= 0 or height <= 0:
        raise PNMError(f"bad header values {width}x{height} maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = data[pos : pos + count * dtype.itemsize]
    if len(raster) < count * dtype.itemsize:
        raise PNMError("truncated raster")
    arr = np.frombuffer(raster, dtype=dtype, count=count).astype(np.int64)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape), maxval


def read_pnm(path: str | Path) -> tuple[np.ndarray, int]:
    return decode_pnm(Path(path).read_bytes())


def read_image(path: str | Path) -> np.ndarray:
    """Grayscale float image in [0, 1]; RGB is averaged over channels."""
    arr, maxval = read_pnm(path)
    img = arr.astype(np.float64) / maxval
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img


def encode_pnm(arr: np.ndarray, maxval: int = 255) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"cannot encode array of shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise PNMError(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n{maxval}\n".encode()
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def write_pnm(path: str | Path, arr: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pnm(arr, maxval))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 0..255 with rounding."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def draw_line(canvas: np.ndarray, p0, p1, color) -> None:
    """Rasterise a segment onto an H×W×3 uint8 canvas (clipped)."""
    x0, y0 = float(p0[0]), float(p0[1])
    x1, y1 = float(p1[0]), float(p1[1])
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    h, w = canvas.shape[:2]
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    canvas[ys[ok], xs[ok]] = color


def side_by_side(img_a: np.ndarray, img_b: np.ndarray) -> np.ndarray:
    """RGB canvas with the two grayscale images next to each other."""
    a, b = to_uint8(img_a), to_uint8(img_b)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3), dtype=np.uint8)
    canvas[: a.shape[0], : a.shape[1]] = a[..., None]
    canvas[: b.shape[0], a.shape[1] :] = b[..., None]
    return canvas
