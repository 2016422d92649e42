"""Box decoding, IoU/CIoU, class-wise NMS and detection metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .tensor import ShapeError

CIOU_EPS = 1e-7
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in input-image pixels
    class_id: int
    score: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_line(self) -> str:
        x1, y1, x2, y2 = self.box
        return f"{self.class_id} {self.score:.6g} {x1:.6g} {y1:.6g} {x2:.6g} {y2:.6g}"


@dataclass(frozen=True)
class GroundTruth:
    box: tuple[float, float, float, float]
    class_id: int


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    map50: float
    map5095: float
    f1: float

    def row(self) -> str:
        """Precision, recall, mAP@.5, mAP@.5:.95, F1; 4 significant digits."""
        vals = (self.precision, self.recall, self.map50, self.map5095, self.f1)
        return " ".join(f"{v:#.4g}" for v in vals)


def f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * a))


# ---------------------------------------------------------------------------
# decode


def decode_arrays(
    raw: np.ndarray,
    anchors: Sequence[tuple[float, float]],
    stride: int,
    conf_threshold: float = 0.25,
    image_size: tuple[int, int] | None = None,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Vectorized decode; per image returns (boxes[k, 4], class_ids[k], scores[k]).

    Candidates are emitted in (anchor, row, column) order.
    """
    raw = np.asarray(raw)
    na = len(anchors)
    if raw.ndim != 4 or raw.shape[1] % na or raw.shape[1] // na < 6:
        raise ShapeError(f"head output shape {raw.shape} incompatible with {na} anchors")
    n, _, gh, gw = raw.shape
    no = raw.shape[1] // na
    img_h, img_w = image_size if image_size is not None else (gh * stride, gw * stride)
    p = _sigmoid(raw.astype(np.float64).reshape(n, na, no, gh, gw))
    gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    aw = np.array([a[0] for a in anchors], dtype=np.float64).reshape(1, na, 1, 1)
    ah = np.array([a[1] for a in anchors], dtype=np.float64).reshape(1, na, 1, 1)
    cx = (2 * p[:, :, 0] - 0.5 + gx) * stride
    cy = (2 * p[:, :, 1] - 0.5 + gy) * stride
    bw = (2 * p[:, :, 2]) ** 2 * aw
    bh = (2 * p[:, :, 3]) ** 2 * ah
    cls = p[:, :, 5:]
    cls_id = cls.argmax(axis=2)
    score = p[:, :, 4] * cls.max(axis=2)
    x1 = np.clip(cx - bw / 2, 0, img_w)
    y1 = np.clip(cy - bh / 2, 0, img_h)
    x2 = np.clip(cx + bw / 2, 0, img_w)
    y2 = np.clip(cy + bh / 2, 0, img_h)
    out = []
    for b in range(n):
        keep = (score[b] >= conf_threshold) & (x2[b] > x1[b]) & (y2[b] > y1[b])
        boxes = np.stack([x1[b][keep], y1[b][keep], x2[b][keep], y2[b][keep]], axis=1)
        out.append((boxes, cls_id[b][keep], score[b][keep]))
    return out


def decode(
    raw: np.ndarray,
    anchors: Sequence[tuple[float, float]],
    stride: int,
    conf_threshold: float = 0.25,
    image_size: tuple[int, int] | None = None,
) -> list[list[Detection]]:
    """Decode one head's raw output into per-image detection lists."""
    result = []
    for boxes, ids, scores in decode_arrays(raw, anchors, stride, conf_threshold, image_size):
        result.append(
            [Detection(tuple(float(v) for v in bx), int(c), float(s)) for bx, c, s in zip(boxes, ids, scores)]
        )
    return result


# ---------------------------------------------------------------------------
# overlap


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def ciou(a: Sequence[float], b: Sequence[float], eps: float = CIOU_EPS) -> float:
    """Complete IoU of two xyxy boxes: IoU minus center and aspect penalties."""
    i = iou(a, b)
    cw = max(a[2], b[2]) - min(a[0], b[0])
    ch = max(a[3], b[3]) - min(a[1], b[1])
    c2 = cw * cw + ch * ch + eps
    rho2 = ((a[0] + a[2]) - (b[0] + b[2])) ** 2 / 4 + ((a[1] + a[3]) - (b[1] + b[3])) ** 2 / 4
    wa, ha = a[2] - a[0], a[3] - a[1]
    wb, hb = b[2] - b[0], b[3] - b[1]
    v = (4 / math.pi**2) * (math.atan(wb / hb) - math.atan(wa / ha)) ** 2
    alpha = v / ((1 - i) + v + eps)
    return i - rho2 / c2 - alpha * v


# ---------------------------------------------------------------------------
# NMS


def nms_order(scores: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    """Descending score, ties by smaller class id, then insertion order."""
    idx = np.arange(len(scores))
    return np.lexsort((idx, np.asarray(class_ids), -np.asarray(scores, dtype=np.float64)))


def nms_arrays(boxes: np.ndarray, class_ids: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.45) -> np.ndarray:
    """Indices kept by class-wise greedy suppression, in output order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    class_ids = np.asarray(class_ids)
    order = nms_order(scores, class_ids)
    kept = []
    for c in np.unique(class_ids):
        cand = order[class_ids[order] == c]
        while cand.size:
            i = cand[0]
            kept.append(i)
            rest = cand[1:]
            if rest.size == 0:
                break
            cand = rest[iou_matrix(boxes[i], boxes[rest])[0] < iou_threshold]
    kept = np.array(kept, dtype=np.int64)
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return kept[np.argsort(rank[kept], kind="stable")]


def nms(dets: Sequence[Detection], iou_threshold: float = 0.45) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box for d in dets])
    ids = np.array([d.class_id for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_arrays(boxes, ids, scores, iou_threshold)]


# ---------------------------------------------------------------------------
# evaluation


def _match(
    preds: Sequence[Detection], gts: Sequence[GroundTruth], thresholds: Sequence[float]
) -> list[tuple[float, int, list[bool]]]:
    """Per prediction: (score, class, TP flag per threshold) for one image."""
    # box as final key keeps the result independent of input order
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].class_id, preds[i].box))
    ious = iou_matrix(np.array([p.box for p in preds]), np.array([g.box for g in gts])) if preds and gts else None
    used = [[False] * len(gts) for _ in thresholds]
    out = []
    for i in order:
        p = preds[i]
        flags = []
        for ti, t in enumerate(thresholds):
            best, best_j = -1.0, -1
            for j, g in enumerate(gts):
                if g.class_id != p.class_id or used[ti][j]:
                    continue
                if ious[i, j] > best:
                    best, best_j = ious[i, j], j
            hit = best_j >= 0 and best >= t
            if hit:
                used[ti][best_j] = True
            flags.append(hit)
        out.append((p.score, p.class_id, flags))
    return out


def average_precision(tp_flags: Sequence[bool], num_gt: int) -> Fraction:
    """All-point interpolated AP of a score-sorted TP/FP sequence, exactly."""
    if num_gt == 0:
        return Fraction(0)
    tp = fp = 0
    precision, recall = [], []
    for hit in tp_flags:
        tp += hit
        fp += not hit
        precision.append(Fraction(tp, tp + fp))
        recall.append(Fraction(tp, num_gt))
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    ap, prev_r = Fraction(0), Fraction(0)
    for p, r in zip(precision, recall):
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def evaluate(
    predictions: Sequence[Sequence[Detection]],
    ground_truths: Sequence[Sequence[GroundTruth]],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    num_classes: int | None = None,
) -> MetricsReport:
    """Precision, recall, mAP@.5, mAP@.5:.95 and F1 over a set of images.

    mAP averages AP over classes that have ground truth. Precision and
    recall pool all classes at IoU 0.5 and are read at the score cut-off
    that maximizes F1.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths cover different image counts")
    thresholds = list(iou_thresholds)
    if 0.5 not in thresholds:
        thresholds = [0.5] + thresholds
    for dets, gts in zip(predictions, ground_truths):
        for obj in list(dets) + list(gts):
            if obj.class_id < 0 or (num_classes is not None and obj.class_id >= num_classes):
                raise ValueError(f"class id {obj.class_id} outside configured range")

    records = []
    gt_per_class: dict[int, int] = {}
    for dets, gts in zip(predictions, ground_truths):
        records.extend(_match(dets, gts, thresholds))
        for g in gts:
            gt_per_class[g.class_id] = gt_per_class.get(g.class_id, 0) + 1
    records.sort(key=lambda r: -r[0])  # stable: image order, then per-image order, breaks ties
    total_gt = sum(gt_per_class.values())

    ap = {}
    for ti, t in enumerate(thresholds):
        per_class = [
            average_precision([r[2][ti] for r in records if r[1] == c], n) for c, n in sorted(gt_per_class.items())
        ]
        ap[t] = sum(per_class, Fraction(0)) / len(per_class) if per_class else Fraction(0)
    map50 = float(ap[0.5])
    used = list(iou_thresholds)
    map5095 = float(sum((ap[t] for t in used), Fraction(0)) / len(used)) if used else 0.0

    best_p = best_r = best_f = 0.0
    tp = fp = 0
    i0 = thresholds.index(0.5)
    for k, r in enumerate(records):
        tp += r[2][i0]
        fp += not r[2][i0]
        if k + 1 < len(records) and records[k + 1][0] == r[0]:
            continue  # a cut-off cannot split equal scores
        p = tp / (tp + fp)
        rc = tp / total_gt if total_gt else 0.0
        f = f1(p, rc)
        if f > best_f:
            best_p, best_r, best_f = p, rc, f
    return MetricsReport(best_p, best_r, map50, map5095, f1(best_p, best_r))
