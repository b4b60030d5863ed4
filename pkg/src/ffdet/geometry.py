"""Boxes, IoU, NMS, anchor grids and box delta coding.

Boxes are ``(x1, y1, x2, y2)`` in pixels, origin top-left. Vectorised
helpers take ``(n, 4)`` float arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

LEVELS = tuple(range(2, 8))
ASPECTS = (1.0, 1.5)
DEFAULT_NMS_THRESH = 0.3


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise BoxError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Anchor:
    box: Box
    level: int
    row: int
    col: int
    aspect_index: int


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n,4) and (m,4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def stride_of(level: int) -> int:
    return 2**level


def anchor_scale(level: int) -> int:
    return 4 * stride_of(level)


def anchor_shape(level: int, aspect: float) -> tuple[float, float]:
    """(width, height) of an anchor; aspect > 1 is taller than wide at equal area."""
    s = anchor_scale(level)
    r = math.sqrt(aspect)
    return s / r, s * r


@lru_cache(maxsize=64)
def _anchor_array(level: int, fmap_h: int, fmap_w: int, aspects: tuple[float, ...]) -> np.ndarray:
    stride = stride_of(level)
    cy = (np.arange(fmap_h) + 0.5) * stride
    cx = (np.arange(fmap_w) + 0.5) * stride
    out = np.empty((fmap_h, fmap_w, len(aspects), 4))
    for a, asp in enumerate(aspects):
        w, h = anchor_shape(level, asp)
        out[:, :, a, 0] = cx[None, :] - w / 2
        out[:, :, a, 1] = cy[:, None] - h / 2
        out[:, :, a, 2] = cx[None, :] + w / 2
        out[:, :, a, 3] = cy[:, None] + h / 2
    out.setflags(write=False)
    return out


def anchor_array(level: int, fmap_h: int, fmap_w: int, aspects=ASPECTS) -> np.ndarray:
    """Anchors of one level as an (H, W, A, 4) array, row-major over (row, col, aspect)."""
    if level not in LEVELS:
        raise ValueError(f"level must be in [2,7], got {level}")
    return _anchor_array(level, fmap_h, fmap_w, tuple(aspects))


def generate_anchors(level: int, fmap_h: int, fmap_w: int, image_w: int = 0, image_h: int = 0,
                     aspects=ASPECTS) -> list[Anchor]:
    """Anchors for one pyramid level. Anchors are not clipped to the image."""
    arr = anchor_array(level, fmap_h, fmap_w, aspects)
    out = []
    for r in range(fmap_h):
        for c in range(fmap_w):
            for a in range(len(aspects)):
                out.append(Anchor(Box(*map(float, arr[r, c, a])), level, r, c, a))
    return out


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) taking each anchor to its paired gt."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    wa, ha = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    wg, hg = gts[:, 2] - gts[:, 0], gts[:, 3] - gts[:, 1]
    if np.any(wg <= 0) or np.any(hg <= 0):
        raise BoxError("ground-truth box with non-positive width or height")
    cxa, cya = anchors[:, 0] + wa / 2, anchors[:, 1] + ha / 2
    cxg, cyg = gts[:, 0] + wg / 2, gts[:, 1] + hg / 2
    return np.stack([(cxg - cxa) / wa, (cyg - cya) / ha, np.log(wg / wa), np.log(hg / ha)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wa, ha = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    cx = anchors[:, 0] + wa / 2 + deltas[:, 0] * wa
    cy = anchors[:, 1] + ha / 2 + deltas[:, 1] * ha
    # keep exp finite for wild early-training predictions
    w = wa * np.exp(np.minimum(deltas[:, 2], 10.0))
    h = ha * np.exp(np.minimum(deltas[:, 3], 10.0))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode_box(anchor: Box, gt: Box) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes([anchor.as_tuple()], [gt.as_tuple()])[0])


def decode_box(anchor: Box, delta) -> Box:
    return Box(*(float(v) for v in decode_boxes([anchor.as_tuple()], [delta])[0]))


def nms(dets: list[Detection] | np.ndarray, iou_thresh: float = DEFAULT_NMS_THRESH, scores=None) -> list[int]:
    """Greedy NMS; returns kept indices ordered by (score desc, input index).

    Accepts a list of Detection, or an (n,4) box array with ``scores``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if scores is None:
        boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
        scores = np.array([d.score for d in dets], dtype=np.float64)
    else:
        boxes = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), -scores))
    boxes = boxes[order]
    suppressed = np.zeros(n, bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(int(order[i]))
        if i + 1 < n:
            ov = iou_matrix(boxes[i : i + 1], boxes[i + 1 :])[0]
            suppressed[i + 1 :] |= ov > iou_thresh
    return keep
