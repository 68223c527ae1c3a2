"""One-to-one branch: query decoder with iterative box refinement and CDN queries.

Query layout inside the decoder is ``[CDN queries | matching queries]``.
CDN queries are grouped ``[group 0: positives, negatives | group 1: ...]``
with ``pad`` slots per half, where ``pad`` is the largest GT count in the
batch; unused slots are marked invalid and isolated by the attention mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import MLP, TokenMemory, inverse_sigmoid
from .gradflow import stop_gradient
from .match import box_cxcywh_to_xyxy, box_xyxy_to_cxcywh


@dataclass
class CDNConfig:
    groups: int = 2
    box_noise: float = 0.4  # positive scale band is [1 - box_noise, 1 + box_noise]
    center_noise: float = 0.5  # positive center shift is below center_noise * (w, h)
    label_keep: float = 0.75
    negative_band: tuple[float, float] = (1.0, 2.0)


@dataclass
class CDNQueries:
    labels: torch.Tensor  # (B, N) possibly flipped class ids
    boxes: torch.Tensor  # (B, N, 4) jittered cxcywh
    gt_index: torch.Tensor  # (B, N) source GT, -1 on invalid slots
    positive: torch.Tensor  # (B, N) bool
    valid: torch.Tensor  # (B, N) bool
    group: torch.Tensor  # (N,) group id per slot
    groups: int
    pad: int

    @property
    def num(self) -> int:
        return self.labels.shape[1]


def jitter_boxes(boxes: torch.Tensor, negative: bool, cfg: CDNConfig, gen: torch.Generator) -> torch.Tensor:
    """Center shift and scale noise; negatives draw magnitudes from ``negative_band``."""
    n = boxes.shape[0]
    lo, hi = cfg.negative_band if negative else (0.0, 1.0)
    mag = lo + (hi - lo) * torch.rand(n, 4, generator=gen, dtype=boxes.dtype)
    sign = torch.randint(0, 2, (n, 4), generator=gen).to(boxes.dtype) * 2 - 1
    cx, cy, w, h = boxes.unbind(-1)
    d = mag * sign
    out = torch.stack(
        [
            cx + d[:, 0] * cfg.center_noise * w,
            cy + d[:, 1] * cfg.center_noise * h,
            w * (1 + d[:, 2] * cfg.box_noise),
            h * (1 + d[:, 3] * cfg.box_noise),
        ],
        -1,
    )
    xyxy = box_cxcywh_to_xyxy(out).clamp(0, 1)
    out = box_xyxy_to_cxcywh(xyxy)
    out[:, 2:] = out[:, 2:].clamp(min=1e-4)
    return out


def _flip_labels(labels, num_classes, keep, gen):
    if num_classes < 2:
        return labels.clone()
    flip = torch.rand(labels.shape, generator=gen) >= keep
    shift = torch.randint(1, num_classes, labels.shape, generator=gen)
    return torch.where(flip, (labels + shift) % num_classes, labels)


def build_cdn(gts, num_classes: int, cfg: CDNConfig, gen: torch.Generator | None = None) -> CDNQueries:
    """Contrastive denoising queries for a batch of ``(labels, boxes)`` targets."""
    if cfg.groups < 1:
        raise ValueError("CDN needs groups >= 1")
    gen = gen if gen is not None else torch.Generator().manual_seed(0)
    B = len(gts)
    pad = max((len(l) for l, _ in gts), default=0)
    N = cfg.groups * 2 * pad
    labels = torch.zeros(B, N, dtype=torch.long)
    boxes = torch.full((B, N, 4), 0.5)
    gt_index = torch.full((B, N), -1, dtype=torch.long)
    positive = torch.zeros(B, N, dtype=torch.bool)
    valid = torch.zeros(B, N, dtype=torch.bool)
    group = torch.arange(N) // max(2 * pad, 1)
    for b, (lab, box) in enumerate(gts):
        m = len(lab)
        if m == 0:
            continue
        box = box.to(torch.float32)
        for g in range(cfg.groups):
            for half, neg in ((0, False), (1, True)):
                start = g * 2 * pad + half * pad
                sl = slice(start, start + m)
                labels[b, sl] = _flip_labels(lab, num_classes, cfg.label_keep, gen)
                boxes[b, sl] = jitter_boxes(box, neg, cfg, gen)
                gt_index[b, sl] = torch.arange(m)
                positive[b, sl] = not neg
                valid[b, sl] = True
    return CDNQueries(labels, boxes, gt_index, positive, valid, group, cfg.groups, pad)


def build_attn_mask(cdn: CDNQueries | None, batch: int, num_queries: int) -> torch.Tensor:
    """Boolean (B, T, T) mask, True = blocked. Rows attend, columns are keys."""
    n = 0 if cdn is None else cdn.num
    T = n + num_queries
    mask = torch.zeros(batch, T, T, dtype=torch.bool)
    if n == 0:
        return mask
    mask[:, n:, :n] = True  # matching queries never see CDN queries
    mask[:, :n, n:] = True  # CDN queries never see matching queries
    same_group = cdn.group[:, None] == cdn.group[None, :]
    mask[:, :n, :n] = ~same_group
    # invalid slots are hidden from everyone but themselves
    hidden = ~cdn.valid  # (B, n)
    mask[:, :, :n] |= hidden[:, None, :]
    eye = torch.eye(T, dtype=torch.bool)
    mask &= ~eye
    return mask


def sine_embed(x: torch.Tensor, dim: int, finest: float = 1 / 32, coarsest: float = 2.0) -> torch.Tensor:
    """Sinusoidal embedding of each coordinate of ``x`` (..., k) into k * dim features.

    Periods are geometric between ``finest`` and ``coarsest`` (in units of
    the normalized image), so dense attention can resolve single grid cells.
    """
    half = dim // 2
    periods = finest * (coarsest / finest) ** (torch.arange(half, dtype=x.dtype, device=x.device) / max(half - 1, 1))
    pos = x[..., None] * (2 * math.pi) / periods
    emb = torch.cat([pos.sin(), pos.cos()], -1)
    return emb.flatten(-2)


class PositionalCrossAttention(nn.Module):
    """Dense multi-head attention whose logits add a content term and a position term.

    ``softmax((Wq q)(Wk k)^T + (Pq q_pos)(Pk k_pos)^T) / sqrt(d_head)``. ``Pq`` and
    ``Pk`` start as one shared scaled orthogonal matrix, so the position term is a
    similarity kernel peaked where the query anchor sits from the first step.
    Called as ``attn(query, key, value, query_pos, key_pos)``.
    """

    def __init__(self, d: int, heads: int, pos_gain: float = 1.5):
        super().__init__()
        self.heads, self.head_dim = heads, d // heads
        self.q_proj, self.k_proj, self.v_proj, self.out_proj = (nn.Linear(d, d) for _ in range(4))
        self.q_pos = nn.Linear(d, d, bias=False)
        self.k_pos = nn.Linear(d, d, bias=False)
        with torch.no_grad():
            nn.init.orthogonal_(self.q_pos.weight, gain=pos_gain)
            self.k_pos.weight.copy_(self.q_pos.weight)

    def _split(self, x):
        return x.unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)

    def forward(self, query, key, value, query_pos, key_pos):
        q = torch.cat([self._split(self.q_proj(query)), self._split(self.q_pos(query_pos))], -1)
        kp = self._split(self.k_pos(key_pos)).expand(key.shape[0], -1, -1, -1)
        k = torch.cat([self._split(self.k_proj(key)), kp], -1)
        v = self._split(self.v_proj(value))
        # the concatenation sums the content and position dot products
        out = nn.functional.scaled_dot_product_attention(q, k, v, scale=1 / math.sqrt(self.head_dim))
        return self.out_proj(out.transpose(-3, -2).flatten(-2))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.cross_attn = PositionalCrossAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn), nn.ReLU(), nn.Linear(ffn, d))
        self.heads = heads

    def forward(self, tgt, query_pos, memory, key_pos, attn_mask=None, self_attn=True, cross_attn=True,
                center_pos=None):
        """``query_pos`` embeds the full anchor; ``center_pos`` embeds its center like ``key_pos``."""
        if self_attn:
            q = k = tgt + query_pos
            mask = None
            if attn_mask is not None:
                mask = attn_mask.repeat_interleave(self.heads, 0)
            sa = self.self_attn(q, k, tgt, attn_mask=mask, need_weights=False)[0]
            tgt = self.norm1(tgt + sa)
        if cross_attn:
            ca = self.cross_attn(tgt + query_pos, memory, memory,
                                 query_pos if center_pos is None else center_pos, key_pos)
            tgt = self.norm2(tgt + ca)
        return self.norm3(tgt + self.ffn(tgt))


@dataclass
class DecoderOutput:
    logits: list[torch.Tensor]  # per layer (B, T, C)
    boxes: list[torch.Tensor]  # per layer (B, T, 4), sigmoid space
    num_cdn: int

    @property
    def num_layers(self) -> int:
        return len(self.logits)

    def matching(self, layer: int = -1):
        return self.logits[layer][:, self.num_cdn :], self.boxes[layer][:, self.num_cdn :]

    def cdn(self, layer: int = -1):
        return self.logits[layer][:, : self.num_cdn], self.boxes[layer][:, : self.num_cdn]


class Decoder(nn.Module):
    def __init__(self, hidden_dim, num_heads, ffn_dim, num_layers, num_classes, num_levels=3):
        super().__init__()
        d = hidden_dim
        self.hidden_dim = d
        self.layers = nn.ModuleList(DecoderLayer(d, num_heads, ffn_dim) for _ in range(num_layers))
        self.class_heads = nn.ModuleList(nn.Linear(d, num_classes) for _ in range(num_layers))
        self.box_heads = nn.ModuleList(MLP(d, d, 4, 3) for _ in range(num_layers))
        self.query_pos_head = MLP(2 * d, d, d, 2)
        self.level_embed = nn.Parameter(torch.zeros(num_levels, d))
        self.label_embed = nn.Embedding(num_classes, d)
        bias = -math.log((1 - 0.01) / 0.01)
        for h in self.class_heads:
            nn.init.constant_(h.bias, bias)
        for h in self.box_heads:
            nn.init.zeros_(h.layers[-1].weight)
            nn.init.zeros_(h.layers[-1].bias)
        nn.init.normal_(self.level_embed, std=0.02)

    def key_pos(self, mem: TokenMemory) -> torch.Tensor:
        grid = mem.grid.normalized_centers.to(mem.tokens.dtype)
        return sine_embed(grid, self.hidden_dim // 2) + self.level_embed[mem.scale_ids].to(mem.tokens.dtype)

    def forward(self, mem: TokenMemory, content: torch.Tensor, anchors: torch.Tensor, attn_mask=None,
                self_attn: bool = True, cross_attn: bool = True, num_cdn: int = 0) -> DecoderOutput:
        """``content`` (B, T, d) and ``anchors`` (B, T, 4) logits, CDN rows first."""
        return decoder_forward(self, mem, content, anchors, attn_mask, self_attn, cross_attn, num_cdn)


def decoder_forward(dec: Decoder, mem: TokenMemory, content, anchors, attn_mask=None,
                    self_attn=True, cross_attn=True, num_cdn: int = 0) -> DecoderOutput:
    if not torch.isfinite(anchors).all():
        raise FloatingPointError("non-finite anchor logits entering the decoder")
    memory = mem.tokens
    key_pos = dec.key_pos(mem)
    tgt = content
    ref = anchors
    logits, boxes = [], []
    for layer, cls_head, box_head in zip(dec.layers, dec.class_heads, dec.box_heads):
        box = ref.sigmoid()
        query_pos = dec.query_pos_head(sine_embed(box, dec.hidden_dim // 2))
        center_pos = sine_embed(box[..., :2], dec.hidden_dim // 2)
        tgt = layer(tgt, query_pos, memory, key_pos, attn_mask, self_attn, cross_attn, center_pos)
        new_ref = ref + box_head(tgt)
        logits.append(cls_head(tgt))
        boxes.append(new_ref.sigmoid())
        ref = stop_gradient(new_ref)
    return DecoderOutput(logits, boxes, num_cdn)


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float
    image_id: int = 0


def predict(out: DecoderOutput, score_threshold: float, image_ids=None) -> list[list[Detection]]:
    """Final-layer matching queries as detections, per image, score-descending. No NMS."""
    logits, boxes = out.matching(-1)
    probs = logits.detach().double().sigmoid()
    scores, classes = probs.max(-1)
    result = []
    for b in range(logits.shape[0]):
        iid = b if image_ids is None else int(image_ids[b])
        s = scores[b].numpy()
        order = np.argsort(-s, kind="stable")
        keep = order[s[order] > score_threshold]
        bx = boxes[b].detach().double().numpy()
        result.append([Detection(tuple(map(float, bx[i])), int(classes[b, i]), float(s[i]), iid) for i in keep])
    return result
