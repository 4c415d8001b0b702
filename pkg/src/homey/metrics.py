"""Detection evaluation: greedy matching, all-point-interpolated AP,
mAP50 / mAP50-95, confusion matrix and off-diagonal mass.

Matching protocol: detections in confidence order each claim the
highest-IoU unmatched same-class GT at or above the threshold. AP uses the
precision envelope p_env(r) = max_{r' >= r} p(r') integrated over recall.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ClassSpec, GroundTruthBox
from .postprocess import Detection, iou_corners

IOU_THRESHOLDS = [round(0.50 + 0.05 * k, 2) for k in range(10)]


@dataclass
class MatchResult:
    det_is_tp: list[bool]
    gt_matched: list[bool]
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)


def match_detections(dets: list[Detection], gts: list[GroundTruthBox],
                     iou_threshold: float) -> MatchResult:
    """Greedy single-claim matching within one image.

    dets must be in confidence-descending order; the returned det_is_tp is
    aligned with that order.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
    matched = [False] * len(gts)
    flags = [False] * len(dets)
    for k in order:
        d = dets[k]
        best, best_iou = -1, 0.0
        for g, gt in enumerate(gts):
            if matched[g] or gt.class_id != d.class_id:
                continue
            iou = iou_corners(d.box, gt.corners())
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            matched[best] = True
            flags[k] = True
    res = MatchResult(flags, matched)
    for d, tp in zip(dets, flags):
        key = d.class_id
        if tp:
            res.tp[key] = res.tp.get(key, 0) + 1
        else:
            res.fp[key] = res.fp.get(key, 0) + 1
    for gt, m in zip(gts, matched):
        if not m:
            res.fn[gt.class_id] = res.fn.get(gt.class_id, 0) + 1
    return res


def average_precision(records: list[tuple[float, bool]],
                      instances: int) -> float:
    """Area under the precision envelope over recall.

    records are (confidence, is_tp) pooled over the dataset for one class;
    sorting is confidence-descending, ties keep input order.
    """
    if instances == 0:
        return 0.0
    if not records:
        return 0.0
    ordered = sorted(records, key=lambda r: -r[0])
    ap = 0.0
    tp_cum = 0
    prev_recall = 0.0
    precisions = []
    recalls = []
    for k, (_, is_tp) in enumerate(ordered, start=1):
        if is_tp:
            tp_cum += 1
        precisions.append(tp_cum / k)
        recalls.append(tp_cum / instances)
    # envelope from the right, then sum recall increments
    env = precisions[:]
    for k in range(len(env) - 2, -1, -1):
        env[k] = max(env[k], env[k + 1])
    for p, r in zip(env, recalls):
        ap += (r - prev_recall) * p
        prev_recall = r
    return ap


def _pool_records(dets_by_image, gts_by_image, iou_threshold):
    """Per-class (confidence, tp) records pooled across images."""
    pools: dict[int, list[tuple[float, bool]]] = {}
    for dets, gts in zip(dets_by_image, gts_by_image):
        ordered = sorted(dets, key=lambda d: -d.confidence)
        res = match_detections(ordered, gts, iou_threshold)
        for d, tp in zip(ordered, res.det_is_tp):
            pools.setdefault(d.class_id, []).append((d.confidence, tp))
    return pools


def instance_counts(gts_by_image, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for gts in gts_by_image:
        for gt in gts:
            counts[gt.class_id] += 1
    return counts


def map_over_thresholds(dets_by_image, gts_by_image, classes: list[ClassSpec]):
    """(mAP50, mAP50-95, per-class AP lists over the 10 IoU thresholds).

    Classes with zero instances are excluded from the means.
    """
    num_classes = len(classes)
    counts = instance_counts(gts_by_image, num_classes)
    if counts.sum() == 0:
        raise ValueError("no ground-truth instances in the evaluation set")
    ap_per_class = {c.id: [] for c in classes}
    for tau in IOU_THRESHOLDS:
        pools = _pool_records(dets_by_image, gts_by_image, tau)
        for c in classes:
            ap_per_class[c.id].append(
                average_precision(pools.get(c.id, []), int(counts[c.id])))
    present = [c.id for c in classes if counts[c.id] > 0]
    map50 = float(np.mean([ap_per_class[c][0] for c in present]))
    map5095 = float(np.mean([np.mean(ap_per_class[c]) for c in present]))
    return map50, map5095, ap_per_class


def confusion_matrix(dets_by_image, gts_by_image, num_classes: int,
                     conf_floor: float = 0.25,
                     iou_floor: float = 0.45) -> np.ndarray:
    """(C+1)x(C+1) counts; rows = predicted, columns = actual, index C is
    background. Matching is greedy by confidence, class-agnostic."""
    mat = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    bg = num_classes
    for dets, gts in zip(dets_by_image, gts_by_image):
        kept = sorted((d for d in dets if d.confidence >= conf_floor),
                      key=lambda d: -d.confidence)
        matched = [False] * len(gts)
        for d in kept:
            best, best_iou = -1, 0.0
            for g, gt in enumerate(gts):
                if matched[g]:
                    continue
                iou = iou_corners(d.box, gt.corners())
                if iou >= iou_floor and iou > best_iou:
                    best, best_iou = g, iou
            if best >= 0:
                matched[best] = True
                mat[d.class_id, gts[best].class_id] += 1
            else:
                mat[d.class_id, bg] += 1
        for gt, m in zip(gts, matched):
            if not m:
                mat[bg, gt.class_id] += 1
    return mat


def offdiag_sum(mat: np.ndarray) -> int:
    """Sum of all off-diagonal entries (background row/column included)."""
    mat = np.asarray(mat)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("offdiag_sum needs a square matrix")
    return int(mat.sum() - np.trace(mat))


def foreground_offdiag_sum(mat: np.ndarray, num_classes: int) -> int:
    """Off-diagonal mass restricted to foreground rows and columns."""
    return offdiag_sum(np.asarray(mat)[:num_classes, :num_classes])


@dataclass
class ClassMetrics:
    class_id: int
    name: str
    instances: int
    precision: float
    recall: float
    ap50: float
    ap50_95: float


@dataclass
class EvalReport:
    rows: list[ClassMetrics]
    mean_precision: float | None
    mean_recall: float | None
    mean_ap50: float | None
    mean_ap50_95: float | None
    confusion: np.ndarray
    offdiag: int


def build_report(dets_by_image, gts_by_image,
                 classes: list[ClassSpec]) -> EvalReport:
    """Full per-class and mean evaluation at IoU 0.5 plus mAP50-95 and the
    confusion matrix. Means are absent (None) when there are no GTs."""
    num_classes = len(classes)
    counts = instance_counts(gts_by_image, num_classes)
    pools50 = _pool_records(dets_by_image, gts_by_image, 0.5)
    if counts.sum() > 0:
        _, _, ap_per_class = map_over_thresholds(dets_by_image, gts_by_image,
                                                 classes)
    else:
        ap_per_class = {c.id: [0.0] * len(IOU_THRESHOLDS) for c in classes}
    rows = []
    for c in classes:
        recs = pools50.get(c.id, [])
        tp = sum(1 for _, hit in recs if hit)
        fp = len(recs) - tp
        inst = int(counts[c.id])
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall = tp / inst if inst > 0 else 0.0
        aps = ap_per_class[c.id]
        rows.append(ClassMetrics(c.id, c.name, inst, precision, recall,
                                 aps[0], float(np.mean(aps))))
    present = [r for r in rows if r.instances > 0]
    if present:
        means = (float(np.mean([r.precision for r in present])),
                 float(np.mean([r.recall for r in present])),
                 float(np.mean([r.ap50 for r in present])),
                 float(np.mean([r.ap50_95 for r in present])))
    else:
        means = (None, None, None, None)
    conf = confusion_matrix(dets_by_image, gts_by_image, num_classes)
    return EvalReport(rows, *means, conf, offdiag_sum(conf))
