"""Small convolutional pyramid producing 1/2 (fine) and 1/8 (coarse) feature maps.

Layout (all 3x3 convs followed by GELU)::

    image -> conv s2 -> conv s1 -> 1x1 fine head              (C_fine  × H/2 × W/2)
                               -> conv s2 -> conv s2 -> 1x1 coarse head  (C_coarse × H/8 × W/8)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from .tensor import Tensor, conv2d, gelu

GRID = 8


class FeaturePyramid(NamedTuple):
    fine: Tensor
    coarse: Tensor


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor


@dataclass
class BackboneParams:
    block1: ConvParams
    block2: ConvParams
    block3: ConvParams
    block4: ConvParams
    fine_head: ConvParams
    coarse_head: ConvParams


def _conv(rng, c_out: int, c_in: int, k: int) -> ConvParams:
    return ConvParams(nn.he_normal(rng, (c_out, c_in, k, k), c_in * k * k), nn.zeros((c_out, 1, 1)))


def init_backbone(rng: np.random.Generator, width: int, c_fine: int, c_coarse: int, in_channels: int = 1) -> BackboneParams:
    return BackboneParams(
        block1=_conv(rng, width, in_channels, 3),
        block2=_conv(rng, width, width, 3),
        block3=_conv(rng, width, width, 3),
        block4=_conv(rng, width, width, 3),
        # heads scaled down so initial descriptors stay O(1)
        fine_head=ConvParams(nn.param(nn.he_normal(rng, (c_fine, width, 1, 1), width).data * 0.5), nn.zeros((c_fine, 1, 1))),
        coarse_head=ConvParams(
            nn.param(nn.he_normal(rng, (c_coarse, width, 1, 1), width).data * 0.5), nn.zeros((c_coarse, 1, 1))
        ),
    )


def _apply(x: Tensor, p: ConvParams, stride: int, act: bool = True) -> Tensor:
    pad = p.weight.shape[-1] // 2
    y = conv2d(x, p.weight, stride=stride, padding=pad) + p.bias
    return gelu(y) if act else y


def check_image_shape(h: int, w: int) -> None:
    if h % GRID or w % GRID:
        raise ValueError(f"image size {h}x{w} is not divisible by {GRID}; pad the image to a multiple of {GRID}")
    if h < 16 or w < 16:
        raise ValueError(f"image size {h}x{w} is below the 16x16 minimum")


def encode_image(img, params: BackboneParams) -> FeaturePyramid:
    img = np.asarray(img, dtype=np.float64)
    x = Tensor(img[None] if img.ndim == 2 else img)
    check_image_shape(*x.shape[1:])
    x = _apply(x, params.block1, 2)
    x = _apply(x, params.block2, 1)
    fine = _apply(x, params.fine_head, 1, act=False)
    x = _apply(x, params.block3, 2)
    x = _apply(x, params.block4, 2)
    coarse = _apply(x, params.coarse_head, 1, act=False)
    return FeaturePyramid(fine, coarse)


def encode(pair, params: BackboneParams) -> tuple[FeaturePyramid, FeaturePyramid]:
    """Encode both images of ``pair`` with shared weights."""
    img_a, img_b = pair
    if np.shape(img_a) != np.shape(img_b):
        raise ValueError(f"image pair shapes differ: {np.shape(img_a)} vs {np.shape(img_b)}")
    return encode_image(img_a, params), encode_image(img_b, params)


def grid_keypoints(h: int, w: int) -> np.ndarray:
    """Centres of the 8x8 cells as (x, y) pixels, row-major: index = r * (w/8) + c."""
    check_image_shape(h, w)
    rows, cols = np.mgrid[0 : h // GRID, 0 : w // GRID]
    return np.stack([GRID * cols.ravel() + GRID / 2, GRID * rows.ravel() + GRID / 2], axis=1).astype(np.float64)


def flatten_coarse(coarse: Tensor) -> Tensor:
    """C×h×w map -> (h*w)×C sequence in row-major cell order."""
    c = coarse.shape[0]
    return coarse.reshape(c, -1).T
