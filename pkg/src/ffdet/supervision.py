"""Training targets: anchor labels, regression targets and weak segmentation maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ASPECTS, LEVELS, anchor_array, anchor_scale, encode_boxes, iou_matrix

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class AnchorLabels:
    """Per-anchor supervision for a flat list of anchors.

    ``labels`` holds 1 (positive), 0 (negative) or -1 (ignored). ``targets``
    rows are meaningful only where ``labels == 1`` and are zero elsewhere.
    """

    labels: np.ndarray
    matched: np.ndarray
    targets: np.ndarray
    max_iou: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels == POSITIVE

    def counts(self) -> dict[str, int]:
        return {
            "positive": int(np.sum(self.labels == POSITIVE)),
            "negative": int(np.sum(self.labels == NEGATIVE)),
            "ignore": int(np.sum(self.labels == IGNORE)),
        }


@dataclass(frozen=True)
class ScaleAssignmentRule:
    levels: tuple[int, ...] = LEVELS

    def scales(self) -> np.ndarray:
        return np.array([anchor_scale(k) for k in self.levels], dtype=np.float64)


def _boxes_array(boxes) -> np.ndarray:
    if len(boxes) and hasattr(boxes[0], "as_tuple"):
        boxes = [b.as_tuple() for b in boxes]
    elif len(boxes) and hasattr(boxes[0], "box"):
        boxes = [b.box.as_tuple() for b in boxes]
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def assign_anchors(anchors, gts, pos_thresh: float = 0.5, neg_thresh: float = 0.4) -> AnchorLabels:
    """Label anchors by their best IoU over ground truths.

    best >= pos_thresh -> positive (matched to the argmax gt, lowest index on
    ties); best < neg_thresh -> negative; otherwise ignored.
    """
    a = _boxes_array(anchors)
    g = _boxes_array(gts)
    n = len(a)
    if len(g) == 0:
        return AnchorLabels(np.zeros(n, np.int8), np.full(n, -1), np.zeros((n, 4)), np.zeros(n))
    ov = iou_matrix(a, g)
    best = ov.argmax(axis=1)
    best_iou = ov[np.arange(n), best]
    labels = np.full(n, IGNORE, np.int8)
    labels[best_iou < neg_thresh] = NEGATIVE
    pos = best_iou >= pos_thresh
    labels[pos] = POSITIVE
    matched = np.where(pos, best, -1)
    targets = np.zeros((n, 4))
    if pos.any():
        targets[pos] = encode_boxes(a[pos], g[best[pos]])
    return AnchorLabels(labels, matched, targets, best_iou)


def assign_faces_to_levels(gts, rule: ScaleAssignmentRule = ScaleAssignmentRule()) -> dict[int, list[int]]:
    """Route each face to the level whose anchor scale is log-nearest to sqrt(area).

    Returns level -> list of gt indices. Ties go to the lower level.
    """
    g = _boxes_array(gts)
    out: dict[int, list[int]] = {k: [] for k in rule.levels}
    if len(g) == 0:
        return out
    f = np.sqrt((g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1]))
    dist = np.abs(np.log2(f)[:, None] - np.log2(rule.scales())[None, :])
    for i, j in enumerate(dist.argmin(axis=1)):
        out[rule.levels[j]].append(i)
    return out


def rasterize_seg_target(faces, level: int, fmap_h: int, fmap_w: int) -> np.ndarray:
    """Binary (1, H, W) map: 1 where the cell centre lies strictly inside a face."""
    g = _boxes_array(faces)
    stride = 2**level
    m = np.zeros((1, fmap_h, fmap_w), np.float64)
    if len(g) == 0:
        return m
    cy = (np.arange(fmap_h) + 0.5) * stride
    cx = (np.arange(fmap_w) + 0.5) * stride
    for x1, y1, x2, y2 in g:
        rows = (cy > y1) & (cy < y2)
        cols = (cx > x1) & (cx < x2)
        m[0][np.ix_(rows, cols)] = 1.0
    return m


@dataclass
class LevelTargets:
    labels: np.ndarray  # (A, H, W) int8
    targets: np.ndarray  # (A, 4, H, W)
    seg: np.ndarray  # (1, H, W)


def build_targets(gts, image_hw: tuple[int, int], levels=LEVELS, aspects=ASPECTS,
                  pos_thresh: float = 0.5, neg_thresh: float = 0.4) -> dict[int, LevelTargets]:
    """All supervision for one image, laid out to match the head output tensors."""
    h, w = image_hw
    g = _boxes_array(gts)
    by_level = assign_faces_to_levels(g, ScaleAssignmentRule(tuple(levels)))
    out = {}
    for k in levels:
        fh, fw = h // 2**k, w // 2**k
        arr = anchor_array(k, fh, fw, aspects)  # (H, W, A, 4)
        lab = assign_anchors(arr.reshape(-1, 4), g, pos_thresh, neg_thresh)
        na = len(aspects)
        labels = lab.labels.reshape(fh, fw, na).transpose(2, 0, 1)
        targets = lab.targets.reshape(fh, fw, na, 4).transpose(2, 3, 0, 1)
        seg = rasterize_seg_target(g[by_level[k]], k, fh, fw)
        out[k] = LevelTargets(np.ascontiguousarray(labels), np.ascontiguousarray(targets), seg)
    return out
