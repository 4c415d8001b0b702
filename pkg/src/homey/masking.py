"""Heuristic object mask: M = sigmoid(alpha*Edge + beta*ColorVar + gamma*Prior).

Edge density is a per-channel Sobel magnitude, color variance a local
population variance; both use replicate padding, stay unnormalized (the
coefficients absorb scale) and are differentiated through, never detached.
The mask multiplies features by (1 + M) and stays active at inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .imageio import read_pgm

EDGE_EPS = 1e-12


@dataclass
class MaskParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    learnable: bool = True
    variance_window: int = 3
    prior_mode: str = "uniform-zero"  # uniform-zero | file | learnable
    prior_path: str | None = None

    def __post_init__(self):
        if self.variance_window % 2 == 0 or self.variance_window < 3:
            raise ValueError("variance_window must be odd and >= 3")
        if self.prior_mode not in ("uniform-zero", "file", "learnable"):
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")
        if self.prior_mode == "file" and not self.prior_path:
            raise ValueError("prior_mode 'file' needs prior_path")


@dataclass
class ContextPrior:
    """Per-scale spatial prior maps (constants or learnable tensors)."""

    maps: list[T.Tensor] = field(default_factory=list)

    def for_scale(self, idx: int) -> T.Tensor:
        return self.maps[idx]


def _resize_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * arr.shape[0] // h).clip(0, arr.shape[0] - 1)
    cols = (np.arange(w) * arr.shape[1] // w).clip(0, arr.shape[1] - 1)
    return arr[rows][:, cols]


def load_prior(params: MaskParams, scale_shapes: list[tuple[int, int]],
               dtype=None) -> ContextPrior:
    """Build per-scale prior maps for the configured mode.

    'learnable' maps are zero-initialized parameters; 'file' reads a PGM in
    [0,1] and nearest-resizes it to each scale; default is constant zero.
    """
    maps = []
    if params.prior_mode == "file":
        src = read_pgm(params.prior_path)
    for idx, (h, w) in enumerate(scale_shapes):
        if params.prior_mode == "uniform-zero":
            maps.append(T.tensor(np.zeros((h, w)), dtype=dtype))
        elif params.prior_mode == "file":
            maps.append(T.tensor(_resize_nearest(src, h, w), dtype=dtype))
        else:
            maps.append(T.param(np.zeros((h, w)), f"mask.prior.s{idx}",
                                dtype=dtype))
    return ContextPrior(maps)


def _separable_taps(x: T.Tensor, axis: int, weights: tuple) -> T.Tensor:
    """Weighted sum of -1/0/+1 shifts along one spatial axis."""
    terms = []
    for off, wgt in zip((-1, 0, 1), weights):
        if wgt == 0:
            continue
        dy, dx = (off, 0) if axis == 0 else (0, off)
        tap = T.shift2d(x, dy, dx)
        terms.append(tap if wgt == 1 else T.scale(tap, float(wgt)))
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def edge_density(feat: T.Tensor) -> T.Tensor:
    """Per-channel Sobel magnitude sqrt(Gx^2 + Gy^2 + eps), channel-averaged.

    Sobel is applied separably: smooth [1,2,1] along one axis, difference
    [-1,0,1] along the other, replicate padding at the borders.
    """
    smooth_y = _separable_taps(feat, 0, (1, 2, 1))
    gx = _separable_taps(smooth_y, 1, (-1, 0, 1))
    smooth_x = _separable_taps(feat, 1, (1, 2, 1))
    gy = _separable_taps(smooth_x, 0, (-1, 0, 1))
    mag = T.sqrt(T.add_scalar(T.add(T.square(gx), T.square(gy)), EDGE_EPS))
    return T.mean_channels(mag)


def color_variance(feat: T.Tensor, window: int = 3) -> T.Tensor:
    """Local population variance over a window x window neighborhood,
    channel-averaged (replicate padding)."""
    if window % 2 == 0:
        raise ValueError("variance window must be odd")
    r = window // 2

    def box_mean(x: T.Tensor) -> T.Tensor:
        rows = None
        for off in range(-r, r + 1):
            tap = T.shift2d(x, off, 0)
            rows = tap if rows is None else T.add(rows, tap)
        full = None
        for off in range(-r, r + 1):
            tap = T.shift2d(rows, 0, off)
            full = tap if full is None else T.add(full, tap)
        return T.scale(full, 1.0 / (window * window))

    mean = box_mean(feat)
    mean_sq = box_mean(T.square(feat))
    var = T.sub(mean_sq, T.square(mean))
    return T.mean_channels(var)


def compute_mask(feat: T.Tensor, params: MaskParams, prior: T.Tensor,
                 coeffs: dict[str, T.Tensor] | None = None) -> T.Tensor:
    """M = sigmoid(alpha*Edge(F) + beta*ColorVar(F) + gamma*Prior).

    coeffs carries the learnable alpha/beta/gamma tensors; without it the
    hand-tuned float values from params are used.
    """
    if prior.shape != feat.shape[:2]:
        raise T.ShapeError(f"prior shape {prior.shape} does not match "
                           f"feature spatial shape {feat.shape[:2]}")
    edge = edge_density(feat)
    var = color_variance(feat, params.variance_window)
    if coeffs is not None:
        pre = T.add(T.add(T.mul(edge, coeffs["alpha"]),
                          T.mul(var, coeffs["beta"])),
                    T.mul(prior, coeffs["gamma"]))
    else:
        pre = T.add(T.add(T.scale(edge, params.alpha),
                          T.scale(var, params.beta)),
                    T.scale(prior, params.gamma))
    return T.sigmoid(pre)


def apply_mask(feat: T.Tensor, mask: T.Tensor) -> T.Tensor:
    """Boosted features F*(1 + M); M broadcasts over channels."""
    if mask.shape != feat.shape[:2]:
        raise T.ShapeError(f"mask shape {mask.shape} does not match feature "
                           f"spatial shape {feat.shape[:2]}")
    return T.mul(feat, T.add_scalar(mask, 1.0))
