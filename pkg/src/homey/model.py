"""Detector assembly: tiny conv backbone, per-scale masking, fusion, and a
one-object-per-cell grid head with an explicit background class.

The finest feature grid (input/2) is the prediction grid: every cell emits
4 box logits plus C+1 class logits. Ground truths are assigned to the cell
containing their center; collisions keep the larger box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import GroundTruthBox
from .fusion import FusionConfig, ScaleFusion, fuse_scales
from .masking import ContextPrior, MaskParams, apply_mask, compute_mask, load_prior
from .rng import SplitMix64


@dataclass
class ModelConfig:
    input_size: int = 96
    channels: tuple = (8, 16, 32)
    num_classes: int = 6
    mask: MaskParams = field(default_factory=MaskParams)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        L = len(self.channels)
        if L < 1:
            raise ValueError("need at least one backbone stage")
        if self.input_size % (2 ** L) != 0:
            raise ValueError(f"input_size must be divisible by 2^{L}")
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class")

    @property
    def num_scales(self) -> int:
        return len(self.channels)

    @property
    def grid_size(self) -> int:
        return self.input_size // 2

    @property
    def head_width(self) -> int:
        return 4 + self.num_classes + 1

    def scale_shapes(self) -> list[tuple[int, int]]:
        return [(self.input_size >> (l + 1), self.input_size >> (l + 1))
                for l in range(self.num_scales)]


class ModelState:
    """Named parameter tensors plus the constant context prior."""

    def __init__(self, cfg: ModelConfig, params: dict[str, T.Tensor],
                 prior: ContextPrior):
        self.cfg = cfg
        self.params = params
        self.prior = prior

    def named(self):
        return self.params.items()

    def fusion_scales(self) -> list[ScaleFusion]:
        return [ScaleFusion(self.params[f"fusion.s{l}.wq"],
                            self.params[f"fusion.s{l}.wk"],
                            self.params[f"fusion.s{l}.wv"],
                            self.params[f"fusion.s{l}.proj"],
                            self.params[f"fusion.s{l}.alpha"])
                for l in range(self.cfg.num_scales)]

    def mask_coeffs(self) -> dict[str, T.Tensor] | None:
        if not self.cfg.mask.learnable:
            return None
        return {k: self.params[f"mask.{k}"] for k in ("alpha", "beta", "gamma")}

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _glorot(rng: SplitMix64, shape, fan_in: int, fan_out: int,
            dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.fill_uniform(shape, -bound, bound).astype(dtype)


def init_model(cfg: ModelConfig, dtype=None) -> ModelState:
    """Deterministic parameter init from cfg.seed (Glorot-uniform kernels,
    zero biases, 1/L fusion weights, unit mask coefficients)."""
    dtype = dtype or T.default_dtype()
    rng = SplitMix64(cfg.seed)
    params: dict[str, T.Tensor] = {}

    def draw(name, shape, fan_in, fan_out):
        params[name] = T.param(_glorot(rng, shape, fan_in, fan_out, dtype),
                               name, dtype=dtype)

    c_in = 3
    for l, c_out in enumerate(cfg.channels):
        draw(f"backbone.s{l}.conv", (3, 3, c_in, c_out), 9 * c_in, 9 * c_out)
        draw(f"backbone.s{l}.down", (3, 3, c_out, c_out), 9 * c_out, 9 * c_out)
        c_in = c_out

    if cfg.mask.learnable:
        for key, val in (("alpha", cfg.mask.alpha), ("beta", cfg.mask.beta),
                         ("gamma", cfg.mask.gamma)):
            params[f"mask.{key}"] = T.param(np.asarray(val), f"mask.{key}",
                                            dtype=dtype)

    prior = load_prior(cfg.mask, cfg.scale_shapes(), dtype=dtype)
    if cfg.mask.prior_mode == "learnable":
        for l, m in enumerate(prior.maps):
            params[m.name] = m

    L = cfg.num_scales
    d_k = cfg.fusion.d_k
    for l, c in enumerate(cfg.channels):
        draw(f"fusion.s{l}.wq", (c, d_k), c, d_k)
        draw(f"fusion.s{l}.wk", (c, d_k), c, d_k)
        draw(f"fusion.s{l}.wv", (c, c), c, c)
        draw(f"fusion.s{l}.proj", (c, cfg.fusion.c_f), c, cfg.fusion.c_f)
        params[f"fusion.s{l}.alpha"] = T.param(np.asarray(1.0 / L),
                                               f"fusion.s{l}.alpha", dtype=dtype)

    draw("head.w", (cfg.fusion.c_f, cfg.head_width),
         cfg.fusion.c_f, cfg.head_width)
    params["head.b"] = T.param(np.zeros(cfg.head_width), "head.b", dtype=dtype)
    return ModelState(cfg, params, prior)


@dataclass
class ForwardPass:
    preds: T.Tensor                 # (S, S, 4 + C + 1)
    feats: list[T.Tensor]           # raw per-scale maps F_l
    masks: list[T.Tensor] | None    # per-scale masks M_l (None when ablated)
    masked: list[T.Tensor]          # boosted maps (== feats when ablated)
    fused: T.Tensor                 # (S, S, C_f)


def forward(state: ModelState, image, mask_enabled: bool = True) -> ForwardPass:
    """Run the full model; returns every intermediate the losses need."""
    cfg = state.cfg
    dtype = state.params["head.w"].data.dtype
    if isinstance(image, T.Tensor):
        if image.data.dtype != dtype:
            if image.requires_grad:
                raise T.ShapeError("image dtype must match model dtype when "
                                   "gradients are requested")
            x = T.Tensor(image.data.astype(dtype))
        else:
            x = image
    else:
        x = T.Tensor(np.asarray(image, dtype=dtype))
    if x.shape != (cfg.input_size, cfg.input_size, 3):
        raise T.ShapeError(f"expected {cfg.input_size}x{cfg.input_size}x3 "
                           f"image, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise FloatingPointError("non-finite input image")

    feats = []
    for l in range(cfg.num_scales):
        x = T.relu(T.conv2d(x, state.params[f"backbone.s{l}.conv"], 1,
                            "replicate"))
        x = T.conv2d(x, state.params[f"backbone.s{l}.down"], 2, "replicate")
        feats.append(x)

    if mask_enabled:
        coeffs = state.mask_coeffs()
        masks = [compute_mask(f, cfg.mask, state.prior.for_scale(l), coeffs)
                 for l, f in enumerate(feats)]
        masked = [apply_mask(f, m) for f, m in zip(feats, masks)]
    else:
        masks = None
        masked = feats

    fused = fuse_scales(masked, state.fusion_scales(), cfg.fusion)
    s = cfg.grid_size
    tokens = T.reshape(fused, (s * s, cfg.fusion.c_f))
    logits = T.add(T.matmul(tokens, state.params["head.w"]),
                   state.params["head.b"])
    preds = T.reshape(logits, (s, s, cfg.head_width))
    T.assert_finite(preds, "grid predictions")
    return ForwardPass(preds, feats, masks, masked, fused)


@dataclass
class AssignmentTargets:
    """Per-cell training targets; class == num_classes means background."""

    class_ids: np.ndarray    # (S*S,) int64
    boxes: np.ndarray        # (S*S, 4) corner form, only valid on positives
    severity: np.ndarray     # (S*S,) float64
    positive: np.ndarray     # (S*S,) bool
    dropped: int
    grid: int


def assign_targets(gts: list[GroundTruthBox], grid: int,
                   num_classes: int) -> AssignmentTargets:
    """Map each GT to the cell containing its center; larger box wins a
    contested cell, the loser is dropped (tallied)."""
    n = grid * grid
    class_ids = np.full(n, num_classes, dtype=np.int64)
    boxes = np.zeros((n, 4), dtype=np.float64)
    severity = np.zeros(n, dtype=np.float64)
    positive = np.zeros(n, dtype=bool)
    areas = np.zeros(n, dtype=np.float64)
    dropped = 0
    for gt in gts:
        i = min(max(int(gt.cy * grid), 0), grid - 1)
        j = min(max(int(gt.cx * grid), 0), grid - 1)
        idx = i * grid + j
        if positive[idx]:
            dropped += 1
            if gt.area() <= areas[idx]:
                continue
        class_ids[idx] = gt.class_id
        boxes[idx] = gt.corners()
        severity[idx] = gt.severity if gt.severity is not None else 1.0
        positive[idx] = True
        areas[idx] = gt.area()
    return AssignmentTargets(class_ids, boxes, severity, positive, dropped,
                             grid)


def _grid_consts(grid: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    j = np.tile(np.arange(grid, dtype=dtype)[None, :, None], (grid, 1, 1))
    i = np.tile(np.arange(grid, dtype=dtype)[:, None, None], (1, grid, 1))
    return i, j


def decode_parts(preds: T.Tensor, grid: int):
    """Differentiable decode of the 4 box channels to clipped corners.

    cx = (sigmoid(tx) + j)/S, cy = (sigmoid(ty) + i)/S, w = sigmoid(tw),
    h = sigmoid(th); corners clipped to [0, 1].
    """
    dtype = preds.data.dtype
    i_const, j_const = _grid_consts(grid, dtype)
    cx = T.scale(T.add(T.sigmoid(T.slice_last(preds, 0, 1)),
                       T.tensor(j_const, dtype=dtype)), 1.0 / grid)
    cy = T.scale(T.add(T.sigmoid(T.slice_last(preds, 1, 2)),
                       T.tensor(i_const, dtype=dtype)), 1.0 / grid)
    w = T.sigmoid(T.slice_last(preds, 2, 3))
    h = T.sigmoid(T.slice_last(preds, 3, 4))
    x1 = T.clip01(T.sub(cx, T.scale(w, 0.5)))
    y1 = T.clip01(T.sub(cy, T.scale(h, 0.5)))
    x2 = T.clip01(T.add(cx, T.scale(w, 0.5)))
    y2 = T.clip01(T.add(cy, T.scale(h, 0.5)))
    return x1, y1, x2, y2


def decode_boxes(preds, grid: int) -> np.ndarray:
    """Non-graph decode: (S, S, >=4) predictions -> (S, S, 4) corners."""
    if isinstance(preds, T.Tensor):
        arr = preds.data
    else:
        arr = np.asarray(preds)
    with T.no_grad():
        parts = decode_parts(T.Tensor(arr), grid)
    return np.concatenate([p.data for p in parts], axis=-1)


def encode_box(cx: float, cy: float, w: float, h: float, i: int, j: int,
               grid: int) -> tuple[float, float, float, float]:
    """Exact logits whose decode reproduces the given achievable box."""
    def logit(p):
        return math.log(p / (1.0 - p))

    return (logit(cx * grid - j), logit(cy * grid - i), logit(w), logit(h))
