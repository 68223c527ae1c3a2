"""Independent reference implementations used as test oracles.

Everything here is written for obviousness, not speed, and shares no code
with the package beyond plain data containers.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def iou_scalar(a, b) -> float:
    """IoU of two cxcywh boxes, computed from corners by hand."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def giou_scalar(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    iou = inter / union if union > 0 else 0.0
    return iou - (enclose - union) / enclose if enclose > 0 else iou


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def cost_entry(logits_row, pred_box, gt_class, gt_box, weights=(2.0, 5.0, 2.0)) -> float:
    w_cls, w_l1, w_giou = weights
    p = sigmoid(float(logits_row[gt_class]))
    l1 = sum(abs(float(pred_box[k]) - float(gt_box[k])) for k in range(4))
    return w_cls * -p + w_l1 * l1 + w_giou * -giou_scalar(pred_box, gt_box)


def brute_force_min(cost) -> float:
    """Minimum total over all injective maps of the smaller side into the larger."""
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if n <= m:
        return min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(c[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def brute_force_lexmin(cost, decimals: int = 9):
    """Lexicographically smallest optimal assignment (row -> col vector, -1 = unmatched sorts last)."""
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    best_total, best_key, best_pairs = None, None, None
    k = min(n, m)
    for rows in itertools.combinations(range(n), k):
        for cols in itertools.permutations(range(m), k):
            total = round(sum(c[r, q] for r, q in zip(rows, cols)), decimals)
            vec = [m] * n
            for r, q in zip(rows, cols):
                vec[r] = q
            if best_total is None or total < best_total or (total == best_total and vec < best_key):
                best_total, best_key = total, vec
                best_pairs = sorted(zip(rows, cols))
    return [(int(r), int(q)) for r, q in best_pairs]


def naive_nms(boxes, scores, classes, thr):
    """O(n^2) greedy NMS returning kept indices in score order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(classes[j] != classes[i] or iou_scalar(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(i)
    return kept


def naive_ap50(dets, gts, num_points: int = 101) -> float:
    """Direct PR-curve construction for AP at IoU 0.5.

    ``dets``: list of (image_id, class_id, box, score); ``gts``: {image_id: [(class_id, box), ...]}.
    Per class: rank detections (score desc, image id, input index), walk
    the list marking each detection TP if its best still-free same-class GT
    in the image reaches IoU 0.5, then average the interpolated precision
    max{p(r') : r' >= r} over ``num_points`` recall levels.
    """
    classes = sorted({c for v in gts.values() for c, _ in v})
    aps = []
    for c in classes:
        n_gt = sum(1 for v in gts.values() for cc, _ in v if cc == c)
        ranked = sorted(
            [(i, d) for i, d in enumerate(dets) if d[1] == c and d[0] in gts],
            key=lambda t: (-t[1][3], t[1][0], t[0]),
        )
        # keep at most 100 per image, selected by the global ranking
        per_img: dict = {}
        capped = []
        for t in sorted([(i, d) for i, d in enumerate(dets) if d[0] in gts], key=lambda t: (-t[1][3], t[1][0], t[0])):
            per_img[t[1][0]] = per_img.get(t[1][0], 0) + 1
            if per_img[t[1][0]] <= 100:
                capped.append(t[0])
        capped = set(capped)
        ranked = [t for t in ranked if t[0] in capped]
        taken = {im: [False] * len(v) for im, v in gts.items()}
        tps = []
        for _, (im, _, box, _) in ranked:
            best, best_j = 0.5, None
            for j, (cc, gb) in enumerate(gts[im]):
                if cc != c or taken[im][j]:
                    continue
                v = iou_scalar(box, gb)
                if v >= best and (best_j is None or v > best):
                    best, best_j = v, j
            if best_j is not None:
                taken[im][best_j] = True
            tps.append(best_j is not None)
        precisions, recalls = [], []
        tp = fp = 0
        for flag in tps:
            tp += flag
            fp += not flag
            precisions.append(tp / (tp + fp))
            recalls.append(tp / n_gt)
        total = 0.0
        for r in np.linspace(0, 1, num_points):
            cands = [p for p, rr in zip(precisions, recalls) if rr >= r]
            total += max(cands) if cands else 0.0
        aps.append(total / num_points)
    return float(np.mean(aps)) if aps else 0.0


def central_difference(f, x: float, h: float) -> float:
    return (f(x + h) - f(x - h)) / (2 * h)
