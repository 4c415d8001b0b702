"""Pure-numpy reference kernels.

These are the fallback path for every hot loop in the tensor engine; the
numba backend must produce the same values up to floating-point
reassociation. Convolutions go through im2col views so the heavy lifting
stays in BLAS.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "numpy"


def conv2d_fwd(xp: np.ndarray, kern: np.ndarray, stride: int,
               ho: int, wo: int) -> np.ndarray:
    """Cross-correlate a padded (Hp, Wp, Cin) map with (k, k, Cin, Cout)."""
    k = kern.shape[0]
    cin = kern.shape[2]
    sy, sx, sc = xp.strides
    cols = as_strided(
        xp,
        shape=(ho, wo, k, k, cin),
        strides=(sy * stride, sx * stride, sy, sx, sc),
        writeable=False,
    )
    out = cols.reshape(ho * wo, k * k * cin) @ kern.reshape(k * k * cin, -1)
    return np.ascontiguousarray(out.reshape(ho, wo, kern.shape[3]))


def conv2d_bwd_kernel(xp: np.ndarray, go: np.ndarray, stride: int,
                      k: int) -> np.ndarray:
    """d(kernel): im2col(x)^T @ d(out)."""
    ho, wo, cout = go.shape
    cin = xp.shape[2]
    sy, sx, sc = xp.strides
    cols = as_strided(
        xp,
        shape=(ho, wo, k, k, cin),
        strides=(sy * stride, sx * stride, sy, sx, sc),
        writeable=False,
    )
    dk = cols.reshape(ho * wo, k * k * cin).T @ go.reshape(ho * wo, cout)
    return dk.reshape(k, k, cin, cout)


def conv2d_bwd_input(go: np.ndarray, kern: np.ndarray, stride: int,
                     hp: int, wp: int) -> np.ndarray:
    """d(padded input): scatter each tap's GEMM back into the padded grid."""
    ho, wo, cout = go.shape
    k = kern.shape[0]
    cin = kern.shape[2]
    dxp = np.zeros((hp, wp, cin), dtype=go.dtype)
    go2 = go.reshape(ho * wo, cout)
    for dy in range(k):
        for dx in range(k):
            contrib = (go2 @ kern[dy, dx].T).reshape(ho, wo, cin)
            dxp[dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += contrib
    return dxp


def softmax_rows_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax with per-row max subtraction (row sums accumulate in
    float64 so wide rows still normalize to 1 within 1e-6)."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    inv = 1.0 / e.sum(axis=1, keepdims=True, dtype=np.float64)
    return e * inv.astype(x.dtype)


def softmax_rows_bwd(y: np.ndarray, go: np.ndarray) -> np.ndarray:
    """dx = y * (go - sum(go * y, rows))."""
    dot = (go * y).sum(axis=1, keepdims=True)
    return y * (go - dot)


def shift2d_adjoint(go: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Adjoint of the clamped spatial shift out[i,j] = x[clip(i+dy), clip(j+dx)].

    Scatter-add row targets, then column targets (the clamp acts per axis).
    """
    h, w = go.shape[:2]
    rows = np.clip(np.arange(h) + dy, 0, h - 1)
    cols = np.clip(np.arange(w) + dx, 0, w - 1)
    tmp = np.zeros_like(go)
    np.add.at(tmp, rows, go)
    out = np.zeros_like(go)
    np.add.at(out.swapaxes(0, 1), cols, tmp.swapaxes(0, 1))
    return out
