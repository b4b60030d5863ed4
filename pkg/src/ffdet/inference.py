"""Single- and multi-scale detection."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data import pad_to_multiple, resize_shorter_side
from .geometry import ASPECTS, DEFAULT_NMS_THRESH, Box, Detection, anchor_array, decode_boxes, nms
from .model import Detector
from .tensor import Tensor, stable_sigmoid


def raw_detections(model: Detector, image: np.ndarray, score_thresh: float, max_per_level: int = 1000,
                   valid_hw: tuple[int, int] | None = None):
    """Decoded (boxes, scores) for one padded (C,H,W) image, before NMS.

    With ``valid_hw`` set, anchors centred in the bottom/right zero padding are
    skipped: they see no image content and the model never trains on them.
    """
    out = model.forward(Tensor(image[None].astype(model.config.dtype)), "infer")
    a = model.config.head.anchors
    all_boxes, all_scores = [], []
    for level, lo in out.levels.items():
        cls = lo.cls_logits.data[0]  # (A, H, W)
        _, h, w = cls.shape
        scores = stable_sigmoid(cls.astype(np.float64)).transpose(1, 2, 0).reshape(-1)
        ok = scores >= score_thresh
        if valid_hw is not None:
            stride = 2**level
            rows = (np.arange(h) + 0.5) * stride < valid_hw[0]
            cols = (np.arange(w) + 0.5) * stride < valid_hw[1]
            ok &= np.repeat((rows[:, None] & cols[None, :]).reshape(-1), a)
        deltas = lo.reg_deltas.data[0].astype(np.float64).reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
        keep = np.flatnonzero(ok)
        if keep.size > max_per_level:
            top = np.argsort(-scores[keep], kind="stable")[:max_per_level]
            keep = np.sort(keep[top])
        if keep.size == 0:
            continue
        anchors = anchor_array(level, h, w, ASPECTS[:a]).reshape(-1, 4)
        all_boxes.append(decode_boxes(anchors[keep], deltas[keep]))
        all_scores.append(scores[keep])
    if not all_boxes:
        return np.zeros((0, 4)), np.zeros(0)
    return np.concatenate(all_boxes), np.concatenate(all_scores)


def detect_arrays(image: np.ndarray, model: Detector, scales=(96, 128, 160), score_thresh: float = 0.05,
                  nms_thresh: float = DEFAULT_NMS_THRESH, max_per_level: int = 1000, clip: bool = True):
    """Detections as (boxes, scores) arrays in original image coordinates, sorted by score.

    With ``clip`` on, boxes whose centre falls outside the image are dropped
    and the rest are clipped to it.
    """
    h, w = image.shape[1:]
    boxes, scores = [], []
    for s in scales:
        resized, _, scale = resize_shorter_side(image, np.zeros((0, 4)), int(s))
        b, sc = raw_detections(model, pad_to_multiple(resized), score_thresh, max_per_level, resized.shape[1:])
        boxes.append(b / scale)
        scores.append(sc)
    boxes = np.concatenate(boxes) if boxes else np.zeros((0, 4))
    scores = np.concatenate(scores) if scores else np.zeros(0)
    if clip and len(boxes):
        # same centre-visibility rule the crop augmentation uses for ground truth
        cx, cy = (boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2
        inside = (cx > 0) & (cx < w) & (cy > 0) & (cy < h)
        boxes, scores = boxes[inside], scores[inside]
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores = boxes[ok], scores[ok]
    if len(scores) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    keep = nms(boxes, nms_thresh, scores=scores)
    return boxes[keep], scores[keep]


def detect(image: np.ndarray, model: Detector, scales=(96, 128, 160), score_thresh: float = 0.05,
           nms_thresh: float = DEFAULT_NMS_THRESH, max_per_level: int = 1000) -> list[Detection]:
    boxes, scores = detect_arrays(image, model, scales, score_thresh, nms_thresh, max_per_level)
    return [Detection(Box(*map(float, b)), float(s)) for b, s in zip(boxes, scores)]


def detect_many(images, model: Detector, scales=(96, 128, 160), score_thresh: float = 0.05,
                nms_thresh: float = DEFAULT_NMS_THRESH, max_per_level: int = 1000, workers: int = 1):
    """detect_arrays over a sequence of images; results keep input order for any worker count."""
    def one(img):
        return detect_arrays(img, model, scales, score_thresh, nms_thresh, max_per_level)

    if workers <= 1:
        return [one(img) for img in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, images))
