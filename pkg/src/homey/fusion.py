"""Multi-scale feature fusion with per-scale soft attention.

Each scale attends over its own (coarse) token grid; attended and raw maps
are upsampled to the finest scale, multiplied elementwise, projected to a
common width and summed with learnable scale weights. The sum runs in
fixed finest-to-coarsest order for bitwise reproducibility.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T


class TokenLimitError(ValueError):
    """Attention token count exceeds the configured hard limit."""


@dataclass
class FusionConfig:
    d_k: int = 8
    c_f: int = 32
    token_limit: int = 4096

    def __post_init__(self):
        if self.d_k < 1 or self.c_f < 1 or self.token_limit < 1:
            raise ValueError("fusion dimensions must be positive")


@dataclass
class ScaleFusion:
    """Per-scale projections and fusion weight (usually model parameters)."""

    wq: T.Tensor   # (C_l, d_k)
    wk: T.Tensor   # (C_l, d_k)
    wv: T.Tensor   # (C_l, C_l)
    proj: T.Tensor  # (C_l, C_f)
    alpha: T.Tensor  # scalar


def attention_core(q: T.Tensor, k: T.Tensor, v: T.Tensor,
                   d_k: int) -> T.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over token rows.

    The 1/sqrt(d_k) scaling is applied to Q before the token-squared GEMM,
    which is algebraically identical and far cheaper than scaling the
    logits matrix.
    """
    logits = T.matmul_nt(T.scale(q, 1.0 / math.sqrt(d_k)), k)
    return T.matmul(T.softmax_rows(logits), v)


def soft_attention(feat: T.Tensor, params: ScaleFusion, d_k: int,
                   token_limit: int) -> T.Tensor:
    """Self-attention over the flattened spatial positions of one scale."""
    h, w, c = feat.shape
    tokens = h * w
    if tokens > token_limit:
        raise TokenLimitError(
            f"{tokens} attention tokens exceed the limit {token_limit}")
    x = T.reshape(feat, (tokens, c))
    out = attention_core(T.matmul(x, params.wq), T.matmul(x, params.wk),
                         T.matmul(x, params.wv), d_k)
    return T.reshape(out, (h, w, c))


def fuse_scales(masked: list[T.Tensor], scales: list[ScaleFusion],
                cfg: FusionConfig) -> T.Tensor:
    """F_fuse = sum_l alpha_l * Proj_l(Up(F_l) * Up(SoftAttn(F_l))).

    masked maps arrive finest-first; coarser extents must divide the finest
    by an integer factor.
    """
    if not masked:
        raise ValueError("fuse_scales needs at least one scale")
    h1, w1, _ = masked[0].shape
    fused = None
    for idx, (feat, params) in enumerate(zip(masked, scales)):
        h, w, c = feat.shape
        if h1 % h or w1 % w or h1 // h != w1 // w:
            raise T.ShapeError(
                f"scale {idx} extent {h}x{w} does not divide finest {h1}x{w1}")
        factor = h1 // h
        attended = soft_attention(feat, params, cfg.d_k, cfg.token_limit)
        up_feat = T.upsample_nearest(feat, factor)
        up_attn = T.upsample_nearest(attended, factor)
        mixed = T.mul(up_feat, up_attn)
        proj = T.matmul(T.reshape(mixed, (h1 * w1, c)), params.proj)
        term = T.mul(T.reshape(proj, (h1, w1, int(params.proj.shape[1]))),
                     params.alpha)
        fused = term if fused is None else T.add(fused, term)
    return fused
