"""Inference-side decoding: per-class confidence thresholds, class-wise NMS
and the severity * confidence risk score."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import ClassSpec
from .model import decode_boxes


@dataclass
class Detection:
    image_id: str
    class_id: int
    box: tuple[float, float, float, float]  # corner form, normalized
    confidence: float
    severity: float = 0.0
    risk_score: float = 0.0
    cell: int = -1  # grid cell of origin, used only for deterministic ties


def iou_corners(a, b) -> float:
    """Plain IoU of two corner boxes."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def extract_candidates(preds, classes: list[ClassSpec],
                       image_id: str = "") -> list[Detection]:
    """Top foreground class per cell, kept iff its softmax probability
    reaches that class's confidence threshold (>= keeps)."""
    arr = preds.data if hasattr(preds, "data") else np.asarray(preds)
    grid = arr.shape[0]
    num_fg = len(classes)
    if arr.shape[-1] != 4 + num_fg + 1:
        raise ValueError(f"prediction width {arr.shape[-1]} does not match "
                         f"{num_fg} classes")
    probs = _softmax(arr[..., 4:].astype(np.float64))
    fg = probs[..., :num_fg]
    best = fg.argmax(axis=-1)
    best_p = np.take_along_axis(fg, best[..., None], axis=-1)[..., 0]
    boxes = decode_boxes(arr, grid)
    thresholds = np.array([c.conf_threshold for c in classes])
    out: list[Detection] = []
    for i in range(grid):
        for j in range(grid):
            cid = int(best[i, j])
            p = float(best_p[i, j])
            if p < thresholds[cid]:
                continue
            spec = classes[cid]
            out.append(Detection(
                image_id, cid, tuple(float(v) for v in boxes[i, j]), p,
                severity=spec.severity, risk_score=spec.severity * p,
                cell=i * grid + j))
    return out


def nms_per_class(dets: list[Detection],
                  iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression: keep confidence-descending (ties by
    lower cell index), drop same-class overlaps with IoU >= threshold."""
    kept: list[Detection] = []
    for cid in sorted({d.class_id for d in dets}):
        group = sorted((d for d in dets if d.class_id == cid),
                       key=lambda d: (-d.confidence, d.cell))
        chosen: list[Detection] = []
        for d in group:
            if all(iou_corners(d.box, k.box) < iou_threshold for k in chosen):
                chosen.append(d)
        kept.extend(chosen)
    kept.sort(key=lambda d: (-d.confidence, d.cell, d.class_id))
    return kept


def score_risk(dets: list[Detection],
               classes: list[ClassSpec]) -> list[Detection]:
    """Attach severity and risk = severity * confidence from the class table."""
    table = {c.id: c for c in classes}
    out = []
    for d in dets:
        spec = table.get(d.class_id)
        if spec is None:
            raise ValueError(f"unknown class id {d.class_id}")
        out.append(replace(d, severity=spec.severity,
                           risk_score=spec.severity * d.confidence))
    return out


def run_inference(preds, classes: list[ClassSpec], image_id: str = "",
                  nms_iou: float = 0.5) -> list[Detection]:
    """extract -> per-class NMS -> risk scores."""
    return score_risk(nms_per_class(extract_candidates(preds, classes,
                                                       image_id), nms_iou),
                      classes)
