"""Numba-jitted kernels for the hot inner loops (row softmax, shift adjoint).

Convolutions are NOT here: an im2col + BLAS GEMM beats direct jitted loops
at every extent this model uses (measured in benchmarks/bench_kernels.py),
so both backends share the numpy conv path.

Parallelism is only over independent outputs (rows / pixels); reductions
run sequentially inside their own output slot, so results are
deterministic for a fixed thread count.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

NAME = "numba"

_LOG2E32 = np.float32(1.4426950408889634)
_LN2_32 = np.float32(0.6931471805599453)


@njit(cache=True, parallel=True)
def _softmax_fwd_f32(x):
    """Row softmax with a vectorized exp: round x/ln2 to an integer
    exponent (assembled through int32 bits), degree-6 Taylor residual.
    ~2e-7 relative accuracy, SIMD-friendly (no libm calls in the row loop).
    """
    n, m = x.shape
    out = np.empty_like(x)
    for i in prange(n):
        row = x[i]
        mx = row[0]
        for j in range(1, m):
            if row[j] > mx:
                mx = row[j]
        t = np.empty(m, np.float32)
        for j in range(m):
            v = (row[j] - mx) * _LOG2E32
            if v < -120.0:
                v = np.float32(-120.0)
            t[j] = v
        fi = np.floor(t + np.float32(0.5))
        u = (t - fi) * _LN2_32
        p = np.float32(1.0) + u * (np.float32(1.0) + u * (np.float32(0.5)
            + u * (np.float32(1.0 / 6.0) + u * (np.float32(1.0 / 24.0)
            + u * (np.float32(1.0 / 120.0) + u * np.float32(1.0 / 720.0))))))
        e = p * ((fi.astype(np.int32) + np.int32(127)) << np.int32(23)).view(np.float32)
        s = 0.0
        for j in range(m):
            s += e[j]
        inv = np.float32(1.0 / s)
        for j in range(m):
            out[i, j] = e[j] * inv
    return out


@njit(cache=True, parallel=True)
def _softmax_fwd_f64(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in prange(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


def softmax_rows_fwd(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.float32:
        return _softmax_fwd_f32(x)
    return _softmax_fwd_f64(x)


@njit(cache=True, parallel=True)
def softmax_rows_bwd(y, go):
    n, m = y.shape
    dx = np.empty_like(y)
    for i in prange(n):
        dot = 0.0
        for j in range(m):
            dot += go[i, j] * y[i, j]
        for j in range(m):
            dx[i, j] = y[i, j] * (go[i, j] - dot)
    return dx


@njit(cache=True)
def _shift2d_adjoint_3d(go, dy, dx):
    h, w, c = go.shape
    out = np.zeros_like(go)
    for i in range(h):
        r = min(max(i + dy, 0), h - 1)
        for j in range(w):
            s = min(max(j + dx, 0), w - 1)
            for k in range(c):
                out[r, s, k] += go[i, j, k]
    return out


def shift2d_adjoint(go: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if go.ndim == 2:
        return _shift2d_adjoint_3d(go[:, :, None], dy, dx)[:, :, 0]
    return _shift2d_adjoint_3d(go, dy, dx)
