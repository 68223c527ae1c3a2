"""Box algebra and bipartite assignment.

Contains IoU/GIoU (scalar and batched torch versions), the DETR-style
matching cost, optimal and greedy matchers, and the two postprocessing
paths compared in the package: ``query_filter`` (score threshold + top-k,
no geometry) and classic per-class ``nms``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .dataio import Box

COST_WEIGHTS = (2.0, 5.0, 2.0)  # (class, L1, GIoU)


# ------------------------------------------------------------------ box algebra


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def box_xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], -1)


def _safe_div(num, den):
    return torch.where(den > 0, num / den.clamp(min=1e-12), torch.zeros_like(num))


def box_iou_xyxy(a: torch.Tensor, b: torch.Tensor, pairwise: bool = True):
    """IoU and union of xyxy boxes; (N, M) if ``pairwise`` else elementwise."""
    if pairwise:
        a, b = a[:, None], b[None]
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    return _safe_div(inter, union), union


def generalized_box_iou_xyxy(a: torch.Tensor, b: torch.Tensor, pairwise: bool = True) -> torch.Tensor:
    iou, union = box_iou_xyxy(a, b, pairwise)
    if pairwise:
        a, b = a[:, None], b[None]
    lt = torch.minimum(a[..., :2], b[..., :2])
    rb = torch.maximum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    enclosing = wh[..., 0] * wh[..., 1]
    return iou - _safe_div(enclosing - union, enclosing)


def box_iou(a: torch.Tensor, b: torch.Tensor, pairwise: bool = True) -> torch.Tensor:
    """IoU of cxcywh boxes."""
    return box_iou_xyxy(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b), pairwise)[0]


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor, pairwise: bool = True) -> torch.Tensor:
    """GIoU of cxcywh boxes."""
    return generalized_box_iou_xyxy(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b), pairwise)


def iou(a: Box, b: Box) -> float:
    ta = torch.tensor([tuple(a)], dtype=torch.float64)
    tb = torch.tensor([tuple(b)], dtype=torch.float64)
    return float(box_iou(ta, tb)[0, 0])


def giou(a: Box, b: Box) -> float:
    ta = torch.tensor([tuple(a)], dtype=torch.float64)
    tb = torch.tensor([tuple(b)], dtype=torch.float64)
    return float(generalized_box_iou(ta, tb)[0, 0])


def iou_matrix_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (N, 4) and (M, 4) cxcywh numpy arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    return box_iou(torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)).numpy()


# ---------------------------------------------------------------------- costs


def build_cost(pred_logits, pred_boxes, gt_class_ids, gt_boxes, weights=COST_WEIGHTS) -> torch.Tensor:
    """Matching cost, rows = predictions, cols = ground truth objects.

    cost = w_cls * (-sigmoid(logit[gt class])) + w_l1 * |pred - gt|_1 + w_giou * (-GIoU)
    """
    w_cls, w_l1, w_giou = weights
    prob = pred_logits.sigmoid()[:, gt_class_ids]
    cost_l1 = torch.cdist(pred_boxes, gt_boxes.to(pred_boxes.dtype), p=1)
    cost_giou = -generalized_box_iou(pred_boxes, gt_boxes.to(pred_boxes.dtype))
    return w_cls * -prob + w_l1 * cost_l1 + w_giou * cost_giou


# ------------------------------------------------------------------ matchers


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)

    def total(self, cost) -> float:
        cost = np.asarray(cost, dtype=np.float64)
        return float(sum(cost[r, c] for r, c in self.pairs))

    def __len__(self):
        return len(self.pairs)


def _as_cost(cost) -> np.ndarray:
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().double().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def _shortest_augmenting_path(c: np.ndarray):
    """Min-cost assignment of every row (rows <= cols) with dual potentials.

    Returns (col_of_row, u, v) with u_i + v_j <= c_ij, equality on matched
    pairs, and v_j <= 0 with v_j < 0 only on matched columns.
    """
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of = np.zeros(m + 1, dtype=np.int64)  # 1-based row matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if row_of[j]:
            col_of[row_of[j] - 1] = j - 1
    return col_of, u[1:], v[1:]


def _saturates(adj: list[list[int]], need: list[int], allowed) -> bool:
    """Kuhn's algorithm: can every vertex in ``need`` be matched to an allowed neighbour?"""
    owner: dict[int, int] = {}

    def augment(x, seen):
        for y in adj[x]:
            if y in seen or not allowed(y):
                continue
            seen.add(y)
            if y not in owner or augment(owner[y], seen):
                owner[y] = x
                return True
        return False

    return all(augment(x, set()) for x in need)


def _lexicographic_optimum(tight: np.ndarray, req_rows: set, req_cols: set):
    """Lexicographically smallest pair list among assignments that are optimal.

    An assignment is optimal iff it uses only tight edges (zero reduced cost)
    and covers every row/column whose dual constraint is active. Rows are
    fixed in order, trying columns ascending and then "unmatched"; each
    choice is kept only if the rest can still cover both required sets
    (two separate matchings suffice, by the Mendelsohn-Dulmage theorem).
    """
    n, m = tight.shape
    radj = [np.flatnonzero(tight[i]).tolist() for i in range(n)]
    cadj = [np.flatnonzero(tight[:, j]).tolist() for j in range(m)]
    chosen: list[int] = []
    used: set[int] = set()
    for i in range(n):
        options = [j for j in radj[i] if j not in used]
        if i not in req_rows:
            options.append(-1)
        for j in options:
            taken = used | {j}
            rows_left = [r for r in range(i + 1, n) if r in req_rows]
            cols_left = [cj for cj in req_cols if cj not in taken]
            if _saturates(radj, rows_left, lambda y: y not in taken) and _saturates(
                cadj, cols_left, lambda r: r > i
            ):
                chosen.append(j)
                used.add(j)
                break
        else:
            return None  # numerical trouble: caller keeps the solver's answer
    return chosen


def _tight_sets(c: np.ndarray):
    """Solve with the smaller side as rows; return tight mask and required sets."""
    n, m = c.shape
    tol = 1e-9 * (1.0 + np.abs(c).max())
    if n <= m:
        col_of, u, v = _shortest_augmenting_path(c)
        reduced = c - u[:, None] - v[None, :]
        pairs = [(i, int(j)) for i, j in enumerate(col_of)]
        req_rows, req_cols = set(range(n)), set(np.flatnonzero(v < -tol).tolist())
    else:
        row_of, u, v = _shortest_augmenting_path(c.T)
        reduced = (c.T - u[:, None] - v[None, :]).T
        pairs = sorted((int(r), j) for j, r in enumerate(row_of))
        req_rows, req_cols = set(np.flatnonzero(v < -tol).tolist()), set(range(m))
    return np.abs(reduced) <= tol, req_rows, req_cols, pairs


def hungarian(cost, tie_break: bool = True) -> Assignment:
    """Minimum-cost one-to-one assignment between rows and columns.

    Rectangular inputs match ``min(rows, cols)`` pairs. With ``tie_break``
    the lexicographically smallest optimal pair list is returned; without it
    the (much faster) compiled solver's optimum is used as-is.
    """
    c = _as_cost(cost)
    n, m = c.shape
    if n == 0 or m == 0:
        return Assignment([])
    if not tie_break:
        r, k = linear_sum_assignment(c)
        return Assignment(sorted(zip(r.tolist(), k.tolist())))
    tight, req_rows, req_cols, pairs = _tight_sets(c)
    best = _lexicographic_optimum(tight, req_rows, req_cols)
    if best is None:
        return Assignment(pairs)
    return Assignment([(i, j) for i, j in enumerate(best) if j >= 0])


def greedy_match(cost) -> Assignment:
    """Repeatedly fix the globally smallest remaining entry (ties by (row, col))."""
    c = _as_cost(cost).copy()
    pairs = []
    for _ in range(min(c.shape)):
        flat = int(np.argmin(c))
        r, k = divmod(flat, c.shape[1])
        pairs.append((r, k))
        c[r, :] = np.inf
        c[:, k] = np.inf
    return Assignment(sorted(pairs))


# -------------------------------------------------------------- postprocessing


@dataclass
class Detections:
    """Columnar detection set: cxcywh boxes, scores, class ids, image ids."""

    boxes: np.ndarray
    scores: np.ndarray
    class_ids: np.ndarray
    image_ids: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        n = len(self.scores)
        ids = np.asarray(self.image_ids, dtype=np.int64).reshape(-1)
        if ids.size == 1 and n != 1:
            ids = np.full(n, ids[0], dtype=np.int64)
        self.image_ids = ids
        if not (len(self.boxes) == len(self.class_ids) == len(self.image_ids) == n):
            raise ValueError("inconsistent detection array lengths")

    def __len__(self):
        return len(self.scores)

    def take(self, idx) -> "Detections":
        idx = np.asarray(idx, dtype=np.int64)
        return Detections(self.boxes[idx], self.scores[idx], self.class_ids[idx], self.image_ids[idx])

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts) -> "Detections":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("boxes", "scores", "class_ids", "image_ids")))

    def sorted_by_score(self) -> "Detections":
        return self.take(np.argsort(-self.scores, kind="stable"))


def query_filter(dets: Detections, threshold: float, max_keep: int) -> Detections:
    """Keep the ``max_keep`` highest scores that reach ``threshold``. Geometry is ignored."""
    order = np.argsort(-dets.scores, kind="stable")[:max_keep]
    order = order[dets.scores[order] >= threshold]
    return dets.take(order)


def nms(dets: Detections, iou_threshold: float) -> Detections:
    """Greedy per-class non-maximum suppression; output is score-sorted."""
    order = np.argsort(-dets.scores, kind="stable")
    boxes = box_cxcywh_to_xyxy(torch.as_tensor(dets.boxes[order])).numpy()
    classes = dets.class_ids[order]
    images = dets.image_ids[order]
    area = (boxes[:, 2] - boxes[:, 0]).clip(0) * (boxes[:, 3] - boxes[:, 1]).clip(0)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(i)
        rest = np.flatnonzero(alive[i + 1 :]) + i + 1
        if rest.size == 0:
            break
        same = rest[(classes[rest] == classes[i]) & (images[rest] == images[i])]
        if same.size == 0:
            continue
        lt = np.maximum(boxes[i, :2], boxes[same, :2])
        rb = np.minimum(boxes[i, 2:], boxes[same, 2:])
        wh = (rb - lt).clip(0)
        inter = wh[:, 0] * wh[:, 1]
        union = area[i] + area[same] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        alive[same[ov > iou_threshold]] = False
    return dets.take(order[keep])
