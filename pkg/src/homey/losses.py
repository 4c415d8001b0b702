"""Training objectives: GIoU/CIoU box loss, background-inclusive
classification, severity-weighted risk loss, mask consistency, and their
weighted combination.

Division of labor: cls covers all grid cells against a background-inclusive
target (where objects are); risk re-classifies the positive cells over the
foreground classes only, weighted by severity (what the objects are).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import AssignmentTargets, ForwardPass, decode_parts

EPS_AREA = 1e-9
EPS_LOG = 1e-12


@dataclass
class LossWeights:
    box: float = 1.0
    cls: float = 0.5
    mask: float = 0.1
    risk: float = 1.0

    def __post_init__(self):
        for name in ("box", "cls", "mask", "risk"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"lambda_{name} must be finite and >= 0")


@dataclass
class LossBreakdown:
    total: float
    box: float
    cls: float
    mask: float
    risk: float
    positives: int


def giou(box_a, box_b) -> float:
    """GIoU of two corner boxes: IoU - (hull - union)/hull, in (-1, 1]."""
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / (union + EPS_AREA) - (hull - union) / (hull + EPS_AREA)


def _giou_graph(p, t, variant: str) -> T.Tensor:
    """Per-row (G/C)IoU between predicted corner columns and constants."""
    px1, py1, px2, py2 = p
    tx1, ty1, tx2, ty2 = t
    iw = T.relu(T.sub(T.minimum(px2, tx2), T.maximum(px1, tx1)))
    ih = T.relu(T.sub(T.minimum(py2, ty2), T.maximum(py1, ty1)))
    inter = T.mul(iw, ih)
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_t = T.mul(T.sub(tx2, tx1), T.sub(ty2, ty1))
    union = T.sub(T.add(area_p, area_t), inter)
    iou = T.div(inter, T.add_scalar(union, EPS_AREA))
    hx1, hy1 = T.minimum(px1, tx1), T.minimum(py1, ty1)
    hx2, hy2 = T.maximum(px2, tx2), T.maximum(py2, ty2)
    hull_w, hull_h = T.sub(hx2, hx1), T.sub(hy2, hy1)
    hull = T.mul(hull_w, hull_h)
    giou_t = T.sub(iou, T.div(T.sub(hull, union), T.add_scalar(hull, EPS_AREA)))
    if variant == "giou":
        return giou_t
    # CIoU: subtract center-distance and aspect-ratio penalties from IoU.
    cxp = T.scale(T.add(px1, px2), 0.5)
    cyp = T.scale(T.add(py1, py2), 0.5)
    cxt = T.scale(T.add(tx1, tx2), 0.5)
    cyt = T.scale(T.add(ty1, ty2), 0.5)
    rho2 = T.add(T.square(T.sub(cxp, cxt)), T.square(T.sub(cyp, cyt)))
    c2 = T.add_scalar(T.add(T.square(hull_w), T.square(hull_h)), EPS_AREA)
    wp, hp = T.sub(px2, px1), T.sub(py2, py1)
    wt, ht = T.sub(tx2, tx1), T.sub(ty2, ty1)
    coef = 4.0 / (np.pi ** 2)
    v = T.scale(T.square(T.sub(T.atan(T.div(wt, T.add_scalar(ht, EPS_AREA))),
                               T.atan(T.div(wp, T.add_scalar(hp, EPS_AREA))))),
                coef)
    one_minus_iou = T.add_scalar(T.scale(iou, -1.0), 1.0)
    alpha = T.div(v, T.add_scalar(T.add(one_minus_iou, v), EPS_AREA))
    return T.sub(T.sub(iou, T.div(rho2, c2)), T.mul(alpha, v))


def _gather_positive_parts(preds: T.Tensor, targets: AssignmentTargets):
    pos_idx = np.nonzero(targets.positive)[0]
    parts = decode_parts(preds, targets.grid)
    flat = [T.reshape(p, (targets.grid * targets.grid, 1)) for p in parts]
    gathered = [T.take_rows(p, pos_idx) for p in flat]
    return gathered, pos_idx


def box_loss(preds: T.Tensor, targets: AssignmentTargets,
             variant: str = "giou") -> T.Tensor:
    """Mean (1 - GIoU) (or CIoU) over positive cells; 0 with no positives."""
    if variant not in ("giou", "ciou"):
        raise ValueError(f"unknown box loss variant {variant!r}")
    pos_idx = np.nonzero(targets.positive)[0]
    if pos_idx.size == 0:
        return T.tensor(0.0, dtype=preds.data.dtype)
    gathered, pos_idx = _gather_positive_parts(preds, targets)
    dtype = preds.data.dtype
    tgt = [T.tensor(targets.boxes[pos_idx, k:k + 1], dtype=dtype)
           for k in range(4)]
    overlap = _giou_graph(gathered, tgt, variant)
    ones = T.tensor(np.ones(overlap.shape), dtype=dtype)
    return T.scale(T.sum_all(T.sub(ones, overlap)), 1.0 / pos_idx.size)


def _one_hot(ids: np.ndarray, width: int, dtype) -> np.ndarray:
    out = np.zeros((ids.size, width), dtype=dtype)
    out[np.arange(ids.size), ids] = 1.0
    return out


def cls_loss(preds: T.Tensor, targets: AssignmentTargets, focal: bool = False,
             focal_gamma: int = 2) -> T.Tensor:
    """Mean cross-entropy over all cells against the background-inclusive
    target; the focal flag multiplies each term by (1 - p_true)^gamma."""
    grid = targets.grid
    width = preds.data.shape[-1] - 4
    dtype = preds.data.dtype
    logits = T.reshape(T.slice_last(preds, 4, 4 + width),
                       (grid * grid, width))
    probs = T.softmax_rows(logits)
    onehot = T.tensor(_one_hot(targets.class_ids, width, dtype), dtype=dtype)
    p_true = T.sum_channels(T.mul(probs, onehot))
    ce = T.scale(T.log(T.add_scalar(p_true, EPS_LOG)), -1.0)
    if focal:
        if focal_gamma < 1 or int(focal_gamma) != focal_gamma:
            raise ValueError("focal_gamma must be a positive integer")
        miss = T.add_scalar(T.scale(p_true, -1.0), 1.0)
        weight = miss
        for _ in range(int(focal_gamma) - 1):
            weight = T.mul(weight, miss)
        ce = T.mul(weight, ce)
    return T.scale(T.sum_all(ce), 1.0 / (grid * grid))


def risk_loss(preds: T.Tensor, targets: AssignmentTargets) -> T.Tensor:
    """Severity-weighted cross-entropy over foreground classes on positives:
    -(sum w * log p_true) / (sum w); 0 with no positives or zero weights."""
    pos_idx = np.nonzero(targets.positive)[0]
    dtype = preds.data.dtype
    if pos_idx.size == 0:
        return T.tensor(0.0, dtype=dtype)
    w = targets.severity[pos_idx]
    w_sum = float(w.sum())
    if w_sum <= 0.0:
        return T.tensor(0.0, dtype=dtype)
    grid = targets.grid
    num_fg = preds.data.shape[-1] - 5
    logits = T.take_rows(T.reshape(T.slice_last(preds, 4, 4 + num_fg),
                                   (grid * grid, num_fg)), pos_idx)
    probs = T.softmax_rows(logits)
    onehot = T.tensor(_one_hot(targets.class_ids[pos_idx], num_fg, dtype),
                      dtype=dtype)
    p_true = T.sum_channels(T.mul(probs, onehot))
    logp = T.log(T.add_scalar(p_true, EPS_LOG))
    weighted = T.mul(logp, T.tensor(w, dtype=dtype))
    return T.scale(T.sum_all(weighted), -1.0 / w_sum)


def mask_loss(masked: list[T.Tensor], feats: list[T.Tensor]) -> T.Tensor:
    """Per scale mean over pixels of the squared channel norm of
    (boosted - raw), averaged over scales."""
    if len(masked) != len(feats):
        raise T.ShapeError("mask_loss needs paired scale lists")
    total = None
    for fm, f in zip(masked, feats):
        if fm.shape != f.shape:
            raise T.ShapeError(f"mask_loss shape mismatch {fm.shape} vs {f.shape}")
        h, w = f.shape[:2]
        per_pixel = T.sum_channels(T.square(T.sub(fm, f)))
        term = T.scale(T.sum_all(per_pixel), 1.0 / (h * w))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(feats))


def total_loss(parts: dict[str, T.Tensor], weights: LossWeights,
               positives: int = 0) -> tuple[T.Tensor, LossBreakdown]:
    """Weighted multi-task combination; reports a numeric breakdown."""
    vals = {}
    for name in ("box", "cls", "mask", "risk"):
        part = parts[name]
        v = float(part.data)
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite {name} loss")
        vals[name] = v
    total = T.add(T.add(T.scale(parts["box"], weights.box),
                        T.scale(parts["cls"], weights.cls)),
                  T.add(T.scale(parts["mask"], weights.mask),
                        T.scale(parts["risk"], weights.risk)))
    breakdown = LossBreakdown(
        total=float(total.data), box=vals["box"], cls=vals["cls"],
        mask=vals["mask"], risk=vals["risk"], positives=positives,
    )
    return total, breakdown


def compute_losses(fwd: ForwardPass, targets: AssignmentTargets,
                   weights: LossWeights, box_variant: str = "giou",
                   focal: bool = False,
                   mask_enabled: bool = True) -> tuple[T.Tensor, LossBreakdown]:
    """All four terms from one forward pass, combined per the loss weights."""
    dtype = fwd.preds.data.dtype
    parts = {
        "box": box_loss(fwd.preds, targets, box_variant),
        "cls": cls_loss(fwd.preds, targets, focal=focal),
        "risk": risk_loss(fwd.preds, targets),
        "mask": (mask_loss(fwd.masked, fwd.feats) if mask_enabled
                 else T.tensor(0.0, dtype=dtype)),
    }
    return total_loss(parts, weights, positives=int(targets.positive.sum()))
