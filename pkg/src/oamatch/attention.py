"""Linear-attention transformer encoder layers and their interleaving schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import (
    DimensionError,
    Tensor,
    concat,
    depthwise_conv3x3,
    elu_plus_one,
    gelu,
    matmul,
    reshape,
    transpose,
)


@dataclass
class EncoderLayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    expand_w: Tensor  # 2C -> gamma*C
    expand_b: Tensor
    dw_kernel: Tensor | None  # (gamma*C)×3×3, absent when use_depthwise is off
    contract_w: Tensor  # gamma*C -> C
    contract_b: Tensor
    use_depthwise: bool = True

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


# one interleaving block: self(A), self(B), cross(A<-B), cross(B<-A)
Block = tuple[EncoderLayerParams, EncoderLayerParams, EncoderLayerParams, EncoderLayerParams]


def init_layer(rng: np.random.Generator, dim: int, gamma: int = 4, use_depthwise: bool = True) -> EncoderLayerParams:
    # [U||M] has 2*dim channels; expanding by gamma/2 gives gamma*dim hidden channels
    hidden = gamma * dim
    dw = np.zeros((hidden, 3, 3))
    dw[:, 1, 1] = 1.0
    dw += 0.05 * rng.standard_normal(dw.shape)
    return EncoderLayerParams(
        w_q=nn.orthogonal(rng, dim, 0.1),
        w_k=nn.orthogonal(rng, dim, 0.1),
        w_v=nn.orthogonal(rng, dim, 0.1),
        expand_w=nn.param(rng.standard_normal((2 * dim, hidden)) * np.sqrt(1.0 / (2 * dim))),
        expand_b=nn.zeros(hidden),
        dw_kernel=nn.param(dw) if use_depthwise else None,
        contract_w=nn.zeros((hidden, dim)),
        contract_b=nn.zeros(dim),
        use_depthwise=use_depthwise,
    )


def init_blocks(rng: np.random.Generator, n_blocks: int, dim: int, gamma: int, use_depthwise: bool) -> list[Block]:
    return [tuple(init_layer(rng, dim, gamma, use_depthwise) for _ in range(4)) for _ in range(n_blocks)]


def linear_attention(u: Tensor, r: Tensor, params: EncoderLayerParams) -> Tensor:
    """M = phi(U W_Q) (phi(R W_K)^T (R W_V)), phi = elu + 1.

    ``u`` is (..., N_u, C) and ``r`` is (..., N_r, C); the keys-values product
    is formed first so the cost is linear in both sequence lengths.
    """
    c = params.dim
    if u.shape[-1] != c or r.shape[-1] != c:
        raise DimensionError(f"attention width {c} does not match inputs {u.shape} / {r.shape}")
    q = elu_plus_one(matmul(u, params.w_q))
    k = elu_plus_one(matmul(r, params.w_k))
    v = matmul(r, params.w_v)
    return matmul(q, matmul(transpose(k), v))


def attention_weights(u: np.ndarray, r: np.ndarray, params: EncoderLayerParams) -> np.ndarray:
    """Dense phi(Q) phi(K)^T with rows normalised to sum to one (for inspection only)."""
    q = elu_plus_one(Tensor(u @ params.w_q.data)).data
    k = elu_plus_one(Tensor(r @ params.w_k.data)).data
    a = q @ k.T
    return a / a.sum(axis=1, keepdims=True)


def seq2img(x: Tensor, grid: tuple[int, int]) -> Tensor:
    return reshape(transpose(x), (x.shape[1], *grid))


def img2seq(x: Tensor) -> Tensor:
    return transpose(reshape(x, (x.shape[0], -1)))


def ffn(u: Tensor, m: Tensor, params: EncoderLayerParams, grid: tuple[int, int] | None = None) -> Tensor:
    """U + contract(GELU(Img2Seq(DW(Seq2Img(expand([U || M]))))))."""
    h = nn.linear(concat([u, m], axis=-1), params.expand_w, params.expand_b)
    if params.use_depthwise:
        if grid is None:
            raise ValueError("depth-wise FFN needs the sequence's grid shape")
        if u.ndim != 2 or grid[0] * grid[1] != u.shape[0]:
            raise DimensionError(f"grid {grid} does not match sequence of shape {u.shape}")
        h = img2seq(depthwise_conv3x3(seq2img(h, grid), params.dw_kernel))
    return u + nn.linear(gelu(h), params.contract_w, params.contract_b)


def tel(u: Tensor, r: Tensor, params: EncoderLayerParams, grid: tuple[int, int] | None = None) -> Tensor:
    return ffn(u, linear_attention(u, r, params), params, grid)


def interleave(fa: Tensor, fb: Tensor, blocks, grid=None, trace: list | None = None) -> tuple[Tensor, Tensor]:
    """Run ``blocks`` of self/self/cross/cross layers.

    The B-side cross layer reads the A sequence *after* its own cross update,
    while the A-side cross layer reads B from before it.
    """
    for self_a, self_b, cross_a, cross_b in blocks:
        steps = ((self_a, "a", "a"), (self_b, "b", "b"), (cross_a, "a", "b"), (cross_b, "b", "a"))
        for layer, dst, src in steps:
            cur = {"a": fa, "b": fb}
            if trace is not None:
                trace.append((layer, cur[dst].data, cur[src].data))
            out = tel(cur[dst], cur[src], layer, grid)
            if dst == "a":
                fa = out
            else:
                fb = out
    return fa, fb


def eitm(fa: Tensor, fb: Tensor, blocks, grid: tuple[int, int], trace: list | None = None) -> tuple[Tensor, Tensor]:
    """Interleaved encoding over all keypoints of both images."""
    return interleave(fa, fb, blocks, grid, trace)


def oatm(fa: Tensor, fb: Tensor, blocks) -> tuple[Tensor, Tensor]:
    """Interleaved encoding over co-visible keypoints (no spatial layout, so no depth-wise conv)."""
    for block in blocks:
        if any(layer.use_depthwise for layer in block):
            raise ValueError("co-visible sequences have no grid layout; depth-wise FFN must be disabled")
    return interleave(fa, fb, blocks)


def sinusoidal_encoding(dim: int, h: int, w: int) -> np.ndarray:
    """Fixed 2D sine/cosine position code as an (h*w)×dim array (row-major cells)."""
    pe = np.zeros((dim, h, w))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    n_freq = max(dim // 4, 1)
    div = np.exp(np.arange(n_freq) * (-np.log(10000.0) / n_freq))
    for i in range(n_freq):
        for j, v in enumerate((np.sin(xs * div[i]), np.cos(xs * div[i]), np.sin(ys * div[i]), np.cos(ys * div[i]))):
            ch = 4 * i + j
            if ch < dim:
                pe[ch] = v
    return pe.reshape(dim, -1).T
