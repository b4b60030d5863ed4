"""Average precision at a fixed IoU threshold, overall and per face-size bucket."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import iou_matrix

BUCKETS = {"small": (0.0, 32.0), "medium": (32.0, 96.0), "large": (96.0, float("inf"))}


def bucket_of(box) -> str:
    """Size bucket by sqrt(area): small < 32 <= medium <= 96 < large."""
    f = float(np.sqrt((box[2] - box[0]) * (box[3] - box[1])))
    if f < 32.0:
        return "small"
    if f <= 96.0:
        return "medium"
    return "large"


def match_image(det_boxes, det_scores, gt_boxes, iou_thresh: float = 0.5) -> np.ndarray:
    """Greedy matching in score order (ties: input order).

    Each detection takes the unmatched gt with the highest IoU >= threshold
    (ties: lowest gt index). Returns the matched gt index per detection, -1
    for false positives.
    """
    det_boxes = np.asarray(det_boxes, np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, np.float64).reshape(-1, 4)
    n = len(det_scores)
    matched = np.full(n, -1)
    if n == 0 or len(gt_boxes) == 0:
        return matched
    ov = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), bool)
    for i in np.lexsort((np.arange(n), -det_scores)):
        cand = np.where(taken | (ov[i] < iou_thresh), -1.0, ov[i])
        j = int(cand.argmax())
        if cand[j] >= 0:
            matched[i] = j
            taken[j] = True
    return matched


def average_precision(tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """All-points interpolated AP for TP flags already in descending score order."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    env = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env)), precision, recall


@dataclass
class EvalReport:
    ap: float
    ap_small: float
    ap_medium: float
    ap_large: float
    n_det: int
    n_gt: int
    n_gt_bucket: dict[str, int] = field(default_factory=dict)
    pr_curve: list[list[float]] = field(default_factory=list)  # [score, precision, recall]
    iou_thresh: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(detections, gts, iou_thresh: float = 0.5) -> EvalReport:
    """``detections``: per image (boxes (n,4), scores (n,)); ``gts``: per image (m,4) boxes."""
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists for {len(gts)} images")
    rows = []  # (score, image, det index, matched gt bucket or None)
    gt_buckets: list[list[str]] = []
    for img, ((boxes, scores), g) in enumerate(zip(detections, gts)):
        g = np.asarray(g, np.float64).reshape(-1, 4)
        buckets = [bucket_of(b) for b in g]
        gt_buckets.append(buckets)
        m = match_image(boxes, scores, g, iou_thresh)
        for i, (s, j) in enumerate(zip(np.asarray(scores, np.float64).reshape(-1), m)):
            rows.append((float(s), img, i, buckets[j] if j >= 0 else None))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    scores = np.array([r[0] for r in rows])
    n_gt = sum(len(b) for b in gt_buckets)
    tp = np.array([r[3] is not None for r in rows], dtype=np.float64)
    ap, prec, rec = average_precision(tp, n_gt)
    counts = {}
    bucket_ap = {}
    for name in BUCKETS:
        counts[name] = sum(b.count(name) for b in gt_buckets)
        keep = np.array([r[3] is None or r[3] == name for r in rows], dtype=bool)
        btp = np.array([r[3] == name for r in rows], dtype=np.float64)[keep] if rows else np.zeros(0)
        bucket_ap[name] = average_precision(btp, counts[name])[0]
    curve = [[float(s), float(p), float(r)] for s, p, r in zip(scores, prec, rec)]
    return EvalReport(ap, bucket_ap["small"], bucket_ap["medium"], bucket_ap["large"], len(rows), n_gt, counts, curve, iou_thresh)
