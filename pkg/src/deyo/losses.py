"""One-to-one set loss, CDN loss and the joint objective L_total = L_o2m + L_o2o."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .match import Assignment, build_cost, generalized_box_iou, hungarian

SET_WEIGHTS = {"cls": 1.0, "l1": 5.0, "giou": 2.0}
O2M_WEIGHTS = {"o2m_cls": 1.0, "o2m_box": 5.0}
MODES = ("o2o_only", "joint")


@dataclass
class LossBundle:
    """Named scalar loss terms and their weights; ``total`` is the weighted sum."""

    terms: dict[str, torch.Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)  # bookkeeping, e.g. positives

    @property
    def total(self) -> torch.Tensor:
        if not self.terms:
            return torch.zeros(())
        # fixed key order keeps the reduction deterministic
        return sum(self.weights[k] * self.terms[k] for k in sorted(self.terms))

    def _partial(self, pred) -> torch.Tensor:
        keys = [k for k in sorted(self.terms) if pred(k)]
        if not keys:
            return torch.zeros(())
        return sum(self.weights[k] * self.terms[k] for k in keys)

    @property
    def o2m(self) -> torch.Tensor:
        return self._partial(lambda k: k.startswith("o2m_"))

    @property
    def o2o(self) -> torch.Tensor:
        return self._partial(lambda k: not k.startswith("o2m_"))

    def merge(self, other: "LossBundle", prefix: str = "", scale: float = 1.0) -> "LossBundle":
        for k, v in other.terms.items():
            name = prefix + k
            if name in self.terms:
                raise KeyError(f"duplicate loss term {name!r}")
            self.terms[name] = v
            self.weights[name] = other.weights[k] * scale
        self.counts.update(other.counts)
        return self

    def scalars(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in sorted(self.terms.items())}
        out["total"] = float(self.total.detach())
        return out


def sigmoid_focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0):
    p = logits.sigmoid()
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (a_t * loss).sum()


def match_layer(pred_logits, pred_boxes, gts, tie_break: bool = False) -> list[Assignment]:
    """Independent Hungarian matching of every image of one prediction layer."""
    out = []
    with torch.no_grad():
        for b, (labels, boxes) in enumerate(gts):
            if len(labels) == 0:
                out.append(Assignment([]))
                continue
            cost = build_cost(pred_logits[b].float(), pred_boxes[b].float(), labels, boxes.float())
            out.append(hungarian(cost, tie_break=tie_break))
    return out


def num_boxes(gts) -> int:
    return max(sum(len(l) for l, _ in gts), 1)


def set_loss(pred_logits, pred_boxes, gts, assignments, normalizer: float | None = None,
             weights=SET_WEIGHTS) -> LossBundle:
    """Focal classification over every query, L1 + (1 - GIoU) over matched pairs."""
    norm = num_boxes(gts) if normalizer is None else normalizer
    target = torch.zeros_like(pred_logits)
    src_b, src_q, tgt_boxes = [], [], []
    for b, (a, (labels, boxes)) in enumerate(zip(assignments, gts)):
        if len(a) == 0:
            continue
        rows = torch.as_tensor(a.rows)
        cols = torch.as_tensor(a.cols)
        target[b, rows, labels[cols]] = 1.0
        src_b.append(torch.full_like(rows, b))
        src_q.append(rows)
        tgt_boxes.append(boxes[cols])
    cls = sigmoid_focal_loss(pred_logits, target) / norm
    if src_b:
        pb = pred_boxes[torch.cat(src_b), torch.cat(src_q)]
        tb = torch.cat(tgt_boxes).to(pb.dtype)
        l1 = (pb - tb).abs().sum() / norm
        giou = (1 - generalized_box_iou(pb, tb, pairwise=False)).sum() / norm
    else:
        zero = pred_boxes.sum() * 0.0
        l1, giou = zero, zero.clone()
    return LossBundle({"cls": cls, "l1": l1, "giou": giou}, dict(weights))


def cdn_loss(cdn_logits, cdn_boxes, cdn, gts, normalizer: float | None = None, weights=SET_WEIGHTS) -> LossBundle:
    """Denoising loss: positives reconstruct their source GT, negatives learn "no object".

    No matching is involved. The default normalizer is ``#GT * groups``.
    """
    if normalizer is None:
        normalizer = num_boxes(gts) * cdn.groups
    target = torch.zeros_like(cdn_logits)
    valid = cdn.valid
    pos = valid & cdn.positive
    pb_list, tb_list = [], []
    for b, (labels, boxes) in enumerate(gts):
        p = pos[b].nonzero().squeeze(1)
        if p.numel() == 0:
            continue
        gi = cdn.gt_index[b, p]
        target[b, p, labels[gi]] = 1.0
        pb_list.append(cdn_boxes[b, p])
        tb_list.append(boxes[gi].to(cdn_boxes.dtype))
    # invalid padding slots carry no supervision
    cls = sigmoid_focal_loss(cdn_logits[valid], target[valid])
    cls = cls / normalizer
    if pb_list:
        pb, tb = torch.cat(pb_list), torch.cat(tb_list)
        l1 = (pb - tb).abs().sum() / normalizer
        giou = (1 - generalized_box_iou(pb, tb, pairwise=False)).sum() / normalizer
    else:
        l1 = cdn_boxes.sum() * 0.0
        giou = l1.clone()
    return LossBundle({"cdn_cls": cls, "cdn_l1": l1, "cdn_giou": giou},
                      {"cdn_cls": weights["cls"], "cdn_l1": weights["l1"], "cdn_giou": weights["giou"]})


def loss_encoder(proposals, gts, weights=SET_WEIGHTS) -> LossBundle:
    """Set loss on the selected top-K proposals (same code path as a decoder layer)."""
    logits = proposals.selected_logits
    boxes = proposals.selected_boxes
    return set_loss(logits, boxes, gts, match_layer(logits, boxes, gts), weights=weights)


def total_loss(dec_out, proposals, gts, mode: str = "o2o_only", cdn=None, o2m_out=None,
               set_weights=SET_WEIGHTS, o2m_weights=O2M_WEIGHTS, o2m_scale: float = 1.0) -> LossBundle:
    """L_o2o = sum over decoder layers of set losses + encoder loss + CDN loss;
    joint mode adds ``o2m_scale * L_o2m``.

    Each decoder layer is matched independently. Final-layer terms are named
    ``cls``/``l1``/``giou``; earlier layers get an ``aux{i}_`` prefix.
    """
    if mode not in MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {MODES}")
    if mode == "joint" and o2m_out is None:
        raise ValueError("joint mode requires one-to-many head outputs")
    if mode == "o2o_only" and o2m_out is not None:
        raise ValueError("o2o_only mode must not receive one-to-many outputs")
    bundle = LossBundle()
    n_layers = dec_out.num_layers
    for layer in range(n_layers):
        logits, boxes = dec_out.matching(layer)
        assigns = match_layer(logits, boxes, gts)
        prefix = "" if layer == n_layers - 1 else f"aux{layer}_"
        bundle.merge(set_loss(logits, boxes, gts, assigns, weights=set_weights), prefix)
        if cdn is not None and cdn.num > 0:
            c_logits, c_boxes = dec_out.cdn(layer)
            cl = cdn_loss(c_logits, c_boxes, cdn, gts, weights=set_weights)
            bundle.merge(cl, "" if layer == n_layers - 1 else f"aux{layer}_")
    if proposals is not None:
        bundle.merge(loss_encoder(proposals, gts, set_weights), "enc_")
    if mode == "joint":
        bundle.merge(o2m_loss(o2m_out, gts, o2m_weights), scale=o2m_scale)
    return bundle


def o2m_loss(o2m_out, gts, weights=O2M_WEIGHTS) -> LossBundle:
    """Assign on the same forward, then the dense one-to-many loss."""
    from .o2m import assign_one_to_many, loss_o2m

    assigns = [
        assign_one_to_many(o2m_out.anchors, labels, boxes, o2m_out.logits[b], o2m_out.boxes[b], warn_empty=False)
        for b, (labels, boxes) in enumerate(gts)
    ]
    return loss_o2m(o2m_out, assigns, gts, weights)
