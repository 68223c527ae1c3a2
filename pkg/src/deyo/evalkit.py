"""Detection metrics and analysis instruments.

* :func:`evaluate` - COCO-style AP over IoU 0.50:0.05:0.95 with 101-point
  interpolation, AP50/AP75, per-class AP, recall@100 and TP/FP counts.
* :func:`ideal_rescore` / :func:`ideal_plus_rescore` - oracle rescoring that
  removes ranking (and, for ideal+, classification) errors.
* :func:`padded_query_analysis` - does removing padded queries change AP50?
* :func:`latency_stability` - NMS vs query filter wall-clock behaviour.
"""
from __future__ import annotations

import heapq
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .match import Detections, hungarian, iou_matrix_np, nms, query_filter

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
HIST_EDGES = np.round(np.linspace(0.0, 1.0, 21), 2)


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    per_class_ap: dict[int, float]
    recall100: float
    tp50: int
    fp50: int
    num_gt: int
    num_dets: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d

    def summary(self) -> str:
        return (f"AP={self.ap:.4f} AP50={self.ap50:.4f} AP75={self.ap75:.4f} "
                f"R@100={self.recall100:.4f} TP50={self.tp50} FP50={self.fp50}")


def _gt_arrays(gt):
    if isinstance(gt, tuple):
        labels, boxes = gt
    else:
        labels, boxes = gt.class_ids, gt.boxes
    if isinstance(labels, torch.Tensor):
        labels, boxes = labels.cpu().numpy(), boxes.cpu().numpy()
    return np.asarray(labels, np.int64).reshape(-1), np.asarray(boxes, np.float64).reshape(-1, 4)


def _gt_map(gts) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Accepts a mapping image_id -> gt or a sequence indexed by image id."""
    items = gts.items() if isinstance(gts, dict) else enumerate(gts)
    return {int(k): _gt_arrays(v) for k, v in items}


def eval_order(dets: Detections) -> np.ndarray:
    """Score-descending order; equal scores by image id, then input index."""
    idx = np.arange(len(dets))
    return np.lexsort((idx, dets.image_ids, -dets.scores))


def cap_per_image(dets: Detections, max_dets: int) -> Detections:
    order = eval_order(dets)
    counts: dict[int, int] = {}
    keep = []
    for i in order:
        im = int(dets.image_ids[i])
        if counts.get(im, 0) < max_dets:
            counts[im] = counts.get(im, 0) + 1
            keep.append(i)
    return dets.take(np.sort(np.asarray(keep, dtype=np.int64)))


def match_detections(det_boxes, gt_boxes, thresholds=IOU_THRESHOLDS) -> np.ndarray:
    """Greedy TP flags (T, n) for score-ordered detections of one image and class.

    Each detection takes the unmatched GT with the highest IoU (ties to the
    lower GT index) provided that IoU reaches the threshold.
    """
    n = len(det_boxes)
    tp = np.zeros((len(thresholds), n), dtype=bool)
    if n == 0 or len(gt_boxes) == 0:
        return tp
    ious = iou_matrix_np(det_boxes, gt_boxes).tolist()
    for t, thr in enumerate(thresholds):
        taken = [False] * len(gt_boxes)
        for i, row in enumerate(ious):
            best, best_j = thr, -1
            for j, v in enumerate(row):
                if not taken[j] and v >= best and (best_j < 0 or v > best):
                    best, best_j = v, j
            if best_j >= 0:
                taken[best_j] = True
                tp[t, i] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP for TP flags already in ranking order."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(pos < len(recall), envelope[np.minimum(pos, len(recall) - 1)], 0.0)
    return float(vals.mean())


def evaluate(dets: Detections, gts, num_classes: int | None = None, max_dets: int = 100) -> EvalReport:
    """COCO-style evaluation. Classes without any GT are left out of the mean."""
    gmap = _gt_map(gts)
    dets = cap_per_image(dets, max_dets)
    # detections on images without annotations are ignored
    known = np.isin(dets.image_ids, np.fromiter(gmap, dtype=np.int64, count=len(gmap)))
    dets = dets.take(np.flatnonzero(known))
    classes = set()
    for labels, _ in gmap.values():
        classes.update(int(c) for c in labels)
    if num_classes is not None:
        classes = {c for c in classes if c < num_classes}
    order = eval_order(dets)
    rank = np.empty(len(dets), dtype=np.int64)
    rank[order] = np.arange(len(dets))
    per_class: dict[int, np.ndarray] = {}
    recalls: dict[int, np.ndarray] = {}
    tp50 = fp50 = 0
    num_gt_total = 0
    for c in sorted(classes):
        flags, ranks = [], []
        n_gt = 0
        for im, (labels, boxes) in gmap.items():
            g = boxes[labels == c]
            n_gt += len(g)
            sel = np.flatnonzero((dets.image_ids == im) & (dets.class_ids == c))
            if sel.size == 0:
                continue
            sel = sel[np.argsort(rank[sel], kind="stable")]
            flags.append(match_detections(dets.boxes[sel], g))
            ranks.append(rank[sel])
        num_gt_total += n_gt
        if flags:
            tp = np.concatenate(flags, 1)
            r = np.concatenate(ranks)
            tp = tp[:, np.argsort(r, kind="stable")]
        else:
            tp = np.zeros((len(IOU_THRESHOLDS), 0), dtype=bool)
        per_class[c] = np.array([interpolated_ap(tp[t], n_gt) for t in range(len(IOU_THRESHOLDS))])
        recalls[c] = tp.sum(1) / max(n_gt, 1)
        tp50 += int(tp[0].sum())
        fp50 += int((~tp[0]).sum())
    if not per_class:
        return EvalReport(0.0, 0.0, 0.0, {}, 0.0, 0, int(len(dets)), 0, int(len(dets)))
    mat = np.stack([per_class[c] for c in sorted(per_class)])  # (C, T)
    return EvalReport(
        ap=float(mat.mean()),
        ap50=float(mat[:, 0].mean()),
        ap75=float(mat[:, 5].mean()),
        per_class_ap={c: float(per_class[c].mean()) for c in sorted(per_class)},
        recall100=float(np.mean([recalls[c].mean() for c in sorted(recalls)])),
        tp50=tp50,
        fp50=fp50,
        num_gt=num_gt_total,
        num_dets=int(len(dets)),
    )


# ---------------------------------------------------------------- oracle rescoring


def _max_weight_pairs(weight: np.ndarray, allowed: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-weight matching restricted to ``allowed`` pairs."""
    if weight.size == 0 or not allowed.any():
        return []
    cost = np.where(allowed, -weight, 0.0)
    return [(r, c) for r, c in hungarian(cost).pairs if allowed[r, c]]


def _evaluation_order(pairs, ious, eval_class, gt_labels) -> list[int]:
    """Order matched detections so that greedy evaluation reproduces ``pairs``.

    Detection ``e`` would grab the partner of ``d`` first if it ranks that GT
    above its own (higher IoU, ties to lower GT index, same evaluated class);
    such ``d`` must come before ``e``. For an IoU-optimal matching this
    precedence graph is acyclic.
    """
    partner = dict(pairs)
    owner = {g: d for d, g in pairs}
    succ: dict[int, list[int]] = {d: [] for d in partner}
    indeg = {d: 0 for d in partner}
    for e, ge in partner.items():
        key_e = (ious[e, ge], -ge)
        for g, d in owner.items():
            if d == e or gt_labels[g] != eval_class[e] or ious[e, g] < 0.5:
                continue
            if (ious[e, g], -g) > key_e:
                succ[d].append(e)
                indeg[e] += 1
    heap = [d for d, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        d = heapq.heappop(heap)
        out.append(d)
        for e in succ[d]:
            indeg[e] -= 1
            if indeg[e] == 0:
                heapq.heappush(heap, e)
    if len(out) != len(partner):  # only reachable through float ties; keep every detection
        out += sorted(set(partner) - set(out))
    return out


def _ideal_pairs(boxes, classes, gt_labels, gt_boxes, class_aware: bool, cover=None):
    ious = iou_matrix_np(boxes, gt_boxes)
    allowed = ious >= 0.5
    if class_aware:
        allowed &= classes[:, None] == gt_labels[None, :]
    n = max(len(boxes), len(gt_boxes), 1)
    # lexicographic: cardinality, then coverage of ``cover``, then total IoU
    mid = float(n + 1)
    big = mid * (n + 1) * 2
    weight = big + ious
    if cover is not None:
        weight = weight + mid * np.isin(np.arange(len(gt_boxes)), list(cover))[None, :]
    return _max_weight_pairs(weight, allowed), ious


def _rescore(dets: Detections, gts, class_aware: bool) -> Detections:
    gmap = _gt_map(gts)
    parts = []
    for im in np.unique(dets.image_ids):
        sel = np.flatnonzero(dets.image_ids == im)
        d = dets.take(sel)
        labels, boxes = gmap.get(int(im), (np.zeros(0, np.int64), np.zeros((0, 4))))
        pairs, ious = _ideal_pairs(d.boxes, d.class_ids, labels, boxes, True)
        classes = d.class_ids.copy()
        if not class_aware:
            cover = {g for _, g in pairs}
            pairs, ious = _ideal_pairs(d.boxes, d.class_ids, labels, boxes, False, cover)
            for r, g in pairs:
                classes[r] = labels[g]
        scores = np.zeros(len(d))
        matched = _evaluation_order(pairs, ious, classes, labels) if pairs else []
        scores[matched] = 1.0
        rest = [i for i in range(len(d)) if i not in set(matched)]
        order = np.asarray(matched + rest, dtype=np.int64)
        parts.append(Detections(d.boxes[order], scores[order], classes[order], d.image_ids[order]))
    return Detections.concat(parts) if parts else Detections.empty()


def ideal_rescore(dets: Detections, gts) -> Detections:
    """Per image: one-to-one match to GT (same class, IoU >= 0.5); matched -> score 1, rest -> 0.

    The matching has maximum cardinality, then maximum total IoU. Output is
    grouped by image with matched detections first, in an order under which
    the greedy evaluator recovers exactly this matching.
    """
    return _rescore(dets, gts, class_aware=True)


def ideal_plus_rescore(dets: Detections, gts) -> Detections:
    """As :func:`ideal_rescore` but class-agnostic; matched detections take the GT class.

    Among maximum-cardinality matchings the one covering every GT that the
    class-aware matching covers is preferred, so ideal+ never scores below ideal.
    """
    return _rescore(dets, gts, class_aware=False)


# ---------------------------------------------------------------- detections I/O


def detections_to_records(dets: Detections) -> list[dict]:
    return [
        {"image_id": int(i), "class_id": int(c), "box": [float(v) for v in b], "score": float(s)}
        for b, s, c, i in zip(dets.boxes, dets.scores, dets.class_ids, dets.image_ids)
    ]


def detections_from_records(records) -> Detections:
    if not records:
        return Detections.empty()
    return Detections(
        [r["box"] for r in records], [r["score"] for r in records],
        [r["class_id"] for r in records], [r["image_id"] for r in records],
    )


def write_detections(path: str | os.PathLike, dets: Detections) -> None:
    Path(path).write_text(json.dumps(detections_to_records(dets), indent=1))


def read_detections(path: str | os.PathLike) -> Detections:
    return detections_from_records(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- model inference


def batches(dataset, batch_size: int):
    for start in range(0, len(dataset), batch_size):
        items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        images = torch.from_numpy(np.stack([im for im, _ in items])).permute(0, 3, 1, 2).float() / 255.0
        yield start, images, [g for _, g in items]


def image_ids(dataset, start: int, n: int) -> np.ndarray:
    ids = getattr(dataset, "image_ids", None)
    if ids is None:
        return np.arange(start, start + n)
    return np.asarray(ids[start : start + n])


def o2o_detections(logits: torch.Tensor, boxes: torch.Tensor, ids) -> Detections:
    """Every query as one detection: class = argmax, score = max probability."""
    probs = logits.detach().double().sigmoid()
    scores, classes = probs.max(-1)
    B, K = scores.shape
    return Detections(
        boxes.detach().double().reshape(-1, 4).numpy(), scores.reshape(-1).numpy(),
        classes.reshape(-1).numpy(), np.repeat(np.asarray(ids), K),
    )


def o2m_detections(out, ids, score_threshold: float = 0.001, pre_nms: int = 300) -> Detections:
    """Dense-head predictions above ``score_threshold``, top ``pre_nms`` per image."""
    probs = out.logits.detach().double().sigmoid()
    scores, classes = probs.max(-1)
    parts = []
    for b in range(probs.shape[0]):
        s = scores[b].numpy()
        order = np.argsort(-s, kind="stable")[:pre_nms]
        order = order[s[order] > score_threshold]
        parts.append(Detections(out.boxes[b].detach().double().numpy()[order], s[order],
                                classes[b].numpy()[order], ids[b]))
    return Detections.concat(parts)


def postprocess(dets: Detections, method: str = "query_filter", score_threshold: float = 0.0,
                max_keep: int = 100, iou_threshold: float = 0.65) -> Detections:
    """Per-image postprocessing; ``query_filter`` is the end-to-end default."""
    parts = []
    for im in np.unique(dets.image_ids):
        d = dets.take(np.flatnonzero(dets.image_ids == im))
        if method == "query_filter":
            parts.append(query_filter(d, score_threshold, max_keep))
        elif method == "nms":
            kept = nms(d, iou_threshold)
            parts.append(kept.take(np.arange(min(len(kept), max_keep))))
        else:
            raise ValueError(f"unknown postprocessing {method!r}; expected query_filter or nms")
    return Detections.concat(parts) if parts else Detections.empty()


@torch.no_grad()
def predict_dataset(model, dataset, branch: str = "o2o", batch_size: int = 32, self_attn: bool = True,
                    pad_threshold: float | None = None, postproc: str | None = None) -> Detections:
    """Run inference over a dataset; returns postprocessed detections.

    ``branch`` o2o uses the final decoder layer with the query filter by
    default; o2m uses the dense head with NMS by default.
    """
    was_training = model.training
    model.eval()
    parts = []
    try:
        for start, images, _ in batches(dataset, batch_size):
            ids = image_ids(dataset, start, len(images))
            out = model(images, self_attn=self_attn, pad_threshold=pad_threshold)
            if branch == "o2o":
                logits, boxes = out.decoder.matching(-1)
                dets = o2o_detections(logits, boxes, ids)
                if out.padded is not None:
                    dets = dets.take(np.flatnonzero(~out.padded.reshape(-1).numpy()))
                parts.append(postprocess(dets, postproc or "query_filter"))
            elif branch == "o2m":
                parts.append(postprocess(o2m_detections(out.o2m, ids), postproc or "nms"))
            else:
                raise ValueError(f"unknown branch {branch!r}")
    finally:
        model.train(was_training)
    return Detections.concat(parts)


def dataset_gts(dataset) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Image id -> (labels, boxes) without decoding images when labels are indexed."""
    ids = image_ids(dataset, 0, len(dataset))
    labels = getattr(dataset, "labels", None)
    return {int(i): _gt_arrays(labels[int(i)] if labels is not None else dataset[k][1])
            for k, i in enumerate(ids)}


def duplicate_rate(dets: Detections, gts, iou_threshold: float = 0.7, score_threshold: float = 0.3) -> float:
    """Fraction of GT objects covered by more than one prediction (any class) above both thresholds."""
    gmap = _gt_map(gts)
    dup = total = 0
    for im, (_, boxes) in gmap.items():
        total += len(boxes)
        sel = np.flatnonzero((dets.image_ids == im) & (dets.scores > score_threshold))
        if sel.size == 0 or len(boxes) == 0:
            continue
        hits = (iou_matrix_np(dets.boxes[sel], boxes) > iou_threshold).sum(0)
        dup += int((hits > 1).sum())
    return dup / total if total else 0.0


# ---------------------------------------------------------------- padded queries


@dataclass
class PaddedQueryReport:
    pad_threshold: float
    ap50_full: float
    ap50_removed: float
    delta_ap50: float
    num_padded: int
    num_queries: int
    bin_edges: list[float]
    hist_padded: list[int]
    hist_kept: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def padded_query_analysis(model, dataset, pad_threshold: float = 0.05, batch_size: int = 32) -> PaddedQueryReport:
    """Evaluate with all selected queries vs with padded ones removed before the decoder.

    A selected query is padded when its selection score is below
    ``pad_threshold``. Histograms bin the final-layer scores of the full run.
    """
    was_training = model.training
    model.eval()
    full, removed = [], []
    s_pad, s_kept = [], []
    n_pad = n_all = 0
    try:
        for start, images, _ in batches(dataset, batch_size):
            ids = image_ids(dataset, start, len(images))
            out_full = model(images)
            logits, boxes = out_full.decoder.matching(-1)
            d_full = o2o_detections(logits, boxes, ids)
            padded = (out_full.proposals.selected_scores < pad_threshold).reshape(-1).numpy()
            n_pad += int(padded.sum())
            n_all += padded.size
            s_pad.append(d_full.scores[padded])
            s_kept.append(d_full.scores[~padded])
            full.append(postprocess(d_full))
            if padded.any():
                out_rm = model(images, pad_threshold=pad_threshold)
                l2, b2 = out_rm.decoder.matching(-1)
                d_rm = o2o_detections(l2, b2, ids).take(np.flatnonzero(~padded))
            else:
                d_rm = d_full
            removed.append(postprocess(d_rm))
    finally:
        model.train(was_training)
    gts = dataset_gts(dataset)
    a_full = evaluate(Detections.concat(full), gts).ap50
    a_rm = evaluate(Detections.concat(removed), gts).ap50
    hp = np.histogram(np.concatenate(s_pad) if s_pad else [], bins=HIST_EDGES)[0]
    hk = np.histogram(np.concatenate(s_kept) if s_kept else [], bins=HIST_EDGES)[0]
    return PaddedQueryReport(pad_threshold, a_full, a_rm, a_rm - a_full, n_pad, n_all,
                             HIST_EDGES.tolist(), hp.tolist(), hk.tolist())


# ---------------------------------------------------------------- latency


def synthetic_detections(n: int, rng: np.random.Generator, clusters: int | None = None,
                         num_classes: int = 3) -> Detections:
    """``n`` boxes grouped around a few centers so that overlap grows with density."""
    clusters = clusters or max(1, n // 10)
    centers = rng.uniform(0.2, 0.8, (clusters, 2))
    which = rng.integers(0, clusters, n)
    xy = centers[which] + rng.normal(0, 0.02, (n, 2))
    wh = rng.uniform(0.1, 0.2, (n, 2))
    boxes = np.concatenate([xy, wh], 1).clip(0.01, 0.99)
    scores = rng.uniform(0, 1, n)
    return Detections(boxes, scores, rng.integers(0, num_classes, n), 0)


@dataclass
class LatencyReport:
    densities: list[int]
    methods: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        out = []
        for m, r in self.methods.items():
            for k, n in enumerate(self.densities):
                out.append({"method": m, "density": n, "mean_s": r["mean"][k], "cv": r["cv"][k]})
        return out


def latency_stability(densities=(10, 50, 100, 500), reps: int = 200, seed: int = 0,
                      iou_threshold: float = 0.65, score_threshold: float = 0.25,
                      max_keep: int = 100) -> LatencyReport:
    """Time NMS and the query filter on identical inputs.

    Per method and density: mean seconds and coefficient of variation over
    ``reps`` calls. Across the sweep: ``cv_across`` (std/mean of the
    per-density means) and ``spread`` (max/min of the means).
    """
    rng = np.random.default_rng(seed)
    inputs = [synthetic_detections(n, rng) for n in densities]
    fns = {
        "nms": lambda d: nms(d, iou_threshold),
        "query_filter": lambda d: query_filter(d, score_threshold, max_keep),
    }
    report = LatencyReport(list(densities))
    for name, fn in fns.items():
        means, cvs, outputs_stable = [], [], True
        for d in inputs:
            ref = fn(d)
            times = np.empty(reps)
            for r in range(reps):
                t0 = time.perf_counter()
                got = fn(d)
                times[r] = time.perf_counter() - t0
                if r == 0:
                    outputs_stable &= bool(np.array_equal(got.scores, ref.scores)
                                           and np.array_equal(got.boxes, ref.boxes))
            means.append(float(times.mean()))
            cvs.append(float(times.std() / times.mean()))
        m = np.asarray(means)
        report.methods[name] = {
            "mean": means,
            "cv": cvs,
            "cv_across": float(m.std() / m.mean()),
            "spread": float(m.max() / m.min()),
            "outputs_stable": outputs_stable,
        }
    return report
