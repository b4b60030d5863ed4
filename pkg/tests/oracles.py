"""Independent reference implementations used only by the tests.

These are deliberately naive: plain Python loops, exhaustive enumeration,
no shared code with the package beyond data types.
"""

from __future__ import annotations

import itertools


def box_area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def iou_ref(a, b):
    """IoU by explicit interval arithmetic."""
    left, right = max(a[0], b[0]), min(a[2], b[2])
    top, bottom = max(a[1], b[1]), min(a[3], b[3])
    if right <= left or bottom <= top:
        return 0.0
    inter = (right - left) * (bottom - top)
    return inter / (box_area(a) + box_area(b) - inter)


def nms_ref(boxes, scores, thresh):
    """Exhaustive NMS definition: a box is kept iff no kept box ranked above it overlaps > thresh.

    Evaluated by repeatedly scanning the ranking until the kept set is stable.
    """
    n = len(scores)
    rank = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = []
    for pos, i in enumerate(rank):
        earlier_kept = [j for j in kept]
        if all(iou_ref(boxes[i], boxes[j]) <= thresh for j in earlier_kept):
            kept.append(i)
    return kept


def ap_bruteforce(dets, gts, iou_thresh=0.5):
    """AP with matching chosen by enumeration.

    Every injective partial assignment of detections to gts with IoU >= thresh
    is enumerated; the chosen one is lexicographically best when detections
    are visited by descending score (each prefers a higher IoU, then a lower
    gt index, then being matched at all). Precision envelope and area are
    computed with explicit loops.

    ``dets``: per image list of (box, score); ``gts``: per image list of boxes.
    """
    flags = []
    n_gt = sum(len(g) for g in gts)
    for img, (d, g) in enumerate(zip(dets, gts)):
        order = sorted(range(len(d)), key=lambda i: (-d[i][1], i))
        options = []
        for i in order:
            opts = [None] + [j for j in range(len(g)) if iou_ref(d[i][0], g[j]) >= iou_thresh]
            options.append(opts)
        best_key, best = None, None
        for combo in itertools.product(*options):
            used = [j for j in combo if j is not None]
            if len(used) != len(set(used)):
                continue
            key = tuple(
                (1, iou_ref(d[i][0], g[j]), -j) if j is not None else (0, 0.0, 0)
                for i, j in zip(order, combo)
            )
            if best_key is None or key > best_key:
                best_key, best = key, combo
        for i, j in zip(order, best if best is not None else [None] * len(order)):
            flags.append((d[i][1], img, i, j is not None))
    flags.sort(key=lambda f: (-f[0], f[1], f[2]))
    if n_gt == 0:
        return 0.0
    precisions, recalls = [], []
    tp = fp = 0
    for _, _, _, hit in flags:
        tp += hit
        fp += not hit
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    ap, prev_r = 0.0, 0.0
    for k in range(len(flags)):
        best_p = max(precisions[k:])
        ap += (recalls[k] - prev_r) * best_p
        prev_r = recalls[k]
    return ap
