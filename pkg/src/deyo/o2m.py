"""One-to-many branch: anchor-free dense head, top-k aligned assigner and loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .gradflow import stop_gradient
from .losses import O2M_WEIGHTS, LossBundle
from .match import box_cxcywh_to_xyxy, box_iou, box_xyxy_to_cxcywh, generalized_box_iou
from .nets import STRIDES, ConvBNAct, FeaturePyramid

log = logging.getLogger(__name__)

TOPK = 10
ALPHA = 0.5
BETA = 6.0


@dataclass
class AnchorGrid:
    """Anchor points of all scales, scale-major and row-major within a scale."""

    centers: torch.Tensor  # (L, 2) pixels
    strides: torch.Tensor  # (L,)
    scale_ids: torch.Tensor  # (L,)
    shapes: tuple[tuple[int, int], ...]
    image_size: int

    def __len__(self):
        return self.centers.shape[0]

    @property
    def normalized_centers(self) -> torch.Tensor:
        return self.centers / self.image_size


def make_anchors(image_size: int, strides=STRIDES, dtype=torch.float32) -> AnchorGrid:
    centers, st, sid, shapes = [], [], [], []
    for k, s in enumerate(strides):
        n = image_size // s
        g = torch.arange(n, dtype=dtype)
        gy, gx = torch.meshgrid(g, g, indexing="ij")
        centers.append(torch.stack([(gx.reshape(-1) + 0.5) * s, (gy.reshape(-1) + 0.5) * s], -1))
        st.append(torch.full((n * n,), float(s), dtype=dtype))
        sid.append(torch.full((n * n,), k, dtype=torch.long))
        shapes.append((n, n))
    return AnchorGrid(torch.cat(centers), torch.cat(st), torch.cat(sid), tuple(shapes), image_size)


def decode_distances(dist: torch.Tensor, anchors: AnchorGrid) -> torch.Tensor:
    """(l, t, r, b) in stride units at each anchor -> normalized cxcywh boxes."""
    c = anchors.centers.to(dist.dtype)
    s = anchors.strides.to(dist.dtype)[:, None]
    lt = c - dist[..., :2] * s
    rb = c + dist[..., 2:] * s
    return box_xyxy_to_cxcywh(torch.cat([lt, rb], -1) / anchors.image_size)


def encode_boxes(boxes: torch.Tensor, anchors: AnchorGrid) -> torch.Tensor:
    """Inverse of :func:`decode_distances`."""
    xyxy = box_cxcywh_to_xyxy(boxes) * anchors.image_size
    c = anchors.centers.to(boxes.dtype)
    s = anchors.strides.to(boxes.dtype)[:, None]
    return torch.cat([(c - xyxy[..., :2]) / s, (xyxy[..., 2:] - c) / s], -1)


@dataclass
class DenseHeadOutput:
    logits: torch.Tensor  # (B, L, C)
    distances: torch.Tensor  # (B, L, 4), >= 0
    boxes: torch.Tensor  # (B, L, 4) normalized cxcywh
    anchors: AnchorGrid


class O2MHead(nn.Module):
    """Decoupled per-scale classification / distance branches."""

    def __init__(self, in_channels, num_classes: int, width: int = 32, prior_prob: float = 0.01):
        super().__init__()
        self.num_classes = num_classes
        self.cls_branch = nn.ModuleList()
        self.reg_branch = nn.ModuleList()
        for c in in_channels:
            self.cls_branch.append(nn.Sequential(ConvBNAct(c, width, 3), nn.Conv2d(width, num_classes, 1)))
            self.reg_branch.append(nn.Sequential(ConvBNAct(c, width, 3), nn.Conv2d(width, 4, 1)))
        bias = -math.log((1 - prior_prob) / prior_prob)
        for br in self.cls_branch:
            nn.init.constant_(br[-1].bias, bias)

    def forward(self, fp: FeaturePyramid) -> DenseHeadOutput:
        logits, dists = [], []
        for x, cls_br, reg_br in zip(fp.maps(), self.cls_branch, self.reg_branch):
            logits.append(cls_br(x).flatten(2).transpose(1, 2))
            dists.append(F.softplus(reg_br(x)).flatten(2).transpose(1, 2))
        logits = torch.cat(logits, 1)
        dists = torch.cat(dists, 1)
        image_size = fp.p3.shape[-1] * fp.strides[0]
        anchors = make_anchors(image_size, fp.strides, dists.dtype)
        return DenseHeadOutput(logits, dists, decode_distances(dists, anchors), anchors)


@dataclass
class DenseAssignment:
    gt_index: torch.Tensor  # (L,) long, -1 = unassigned
    weight: torch.Tensor  # (L,) in (0, 1] on positives, 0 elsewhere

    @property
    def positives(self) -> torch.Tensor:
        return self.gt_index >= 0


@torch.no_grad()
def assign_one_to_many(
    anchors: AnchorGrid,
    gt_class_ids: torch.Tensor,
    gt_boxes: torch.Tensor,
    pred_logits: torch.Tensor | None = None,
    pred_boxes: torch.Tensor | None = None,
    topk: int = TOPK,
    alpha: float = ALPHA,
    beta: float = BETA,
    warn_empty: bool = True,
) -> DenseAssignment:
    """Task-aligned top-k assignment for one image.

    Candidates are anchors whose center lies inside a GT box. Each GT keeps
    its ``topk`` candidates by ``score**alpha * IoU**beta``; an anchor claimed
    twice goes to the GT with the larger metric. Without predictions the
    metric reduces to the IoU of an anchor-centred prior box.
    """
    L = len(anchors)
    M = len(gt_class_ids)
    gt_index = torch.full((L,), -1, dtype=torch.long)
    weight = torch.zeros(L)
    if M == 0:
        return DenseAssignment(gt_index, weight)
    gt_boxes = gt_boxes.to(torch.float32)
    centers = anchors.normalized_centers
    xyxy = box_cxcywh_to_xyxy(gt_boxes)
    inside = (
        (centers[None, :, 0] > xyxy[:, None, 0])
        & (centers[None, :, 0] < xyxy[:, None, 2])
        & (centers[None, :, 1] > xyxy[:, None, 1])
        & (centers[None, :, 1] < xyxy[:, None, 3])
    )  # (M, L)
    if pred_boxes is None:
        side = anchors.strides / anchors.image_size
        pred_boxes = torch.cat([centers, side[:, None].expand(-1, 2)], -1)
        score = torch.ones(M, L)
    else:
        score = pred_logits.detach().float().sigmoid()[:, gt_class_ids].T
    overlaps = box_iou(gt_boxes, pred_boxes.detach().float()).clamp(min=0)  # (M, L)
    metric = score.pow(alpha) * overlaps.pow(beta)
    metric = torch.where(inside, metric, torch.full_like(metric, -1.0))

    claim = torch.full((M, L), -1.0)
    for g in range(M):
        n_cand = int(inside[g].sum())
        if n_cand == 0:
            (log.warning if warn_empty else log.debug)(
                "ground truth box %d has no anchor center inside; it gets no positives", g)
            continue
        order = torch.sort(metric[g], descending=True, stable=True).indices[: min(topk, n_cand)]
        claim[g, order] = metric[g, order]
    best_metric, best_gt = claim.max(0)
    pos = best_metric >= 0
    gt_index[pos] = best_gt[pos]
    # normalize per GT so its best positive has weight 1
    for g in range(M):
        sel = gt_index == g
        if sel.any():
            m = best_metric[sel]
            top = m.max()
            weight[sel] = torch.where(top > 0, m / top, torch.ones_like(m)).clamp(min=1e-6)
    return DenseAssignment(gt_index, weight)


def loss_o2m(out: DenseHeadOutput, assigns: list[DenseAssignment], gts: list[tuple[torch.Tensor, torch.Tensor]],
             weights=O2M_WEIGHTS) -> LossBundle:
    """Dense one-to-many loss summed over the batch.

    Terms ``o2m_cls``: BCE against IoU-aware soft targets over
    every anchor, and weighted (1 - GIoU) + L1 over positives; both divided by
    the number of positives (at least 1).
    """
    B, L, C = out.logits.shape
    target = torch.zeros_like(out.logits)
    box_terms = []
    num_pos = 0
    for b in range(B):
        a = assigns[b]
        pos = a.positives
        n = int(pos.sum())
        if n == 0:
            continue
        num_pos += n
        labels, boxes = gts[b]
        gi = a.gt_index[pos]
        pred = out.boxes[b, pos]
        tgt = boxes[gi].to(pred.dtype)
        quality = box_iou(stop_gradient(pred), tgt, pairwise=False).clamp(0, 1)
        target[b, pos.nonzero().squeeze(1), labels[gi]] = quality.to(target.dtype)
        w = stop_gradient(a.weight[pos].to(pred.dtype))
        g = generalized_box_iou(pred, tgt, pairwise=False)
        l1 = (pred - tgt).abs().sum(-1)
        box_terms.append((w * ((1 - g) + l1)).sum())
    norm = max(num_pos, 1)
    cls = F.binary_cross_entropy_with_logits(out.logits, target, reduction="sum") / norm
    box = torch.stack(box_terms).sum() / norm if box_terms else out.boxes.sum() * 0.0
    return LossBundle({"o2m_cls": cls, "o2m_box": box}, dict(weights), {"num_pos": num_pos})
