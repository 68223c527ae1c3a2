"""Efficient encoder: per-scale 1x1 projection, token concat, proposals and query selection.

No attention is used here; each token is a function of one pixel of one
pyramid level only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .nets import FeaturePyramid
from .o2m import AnchorGrid, make_anchors


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(0, 1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


@dataclass
class TokenMemory:
    tokens: torch.Tensor  # (B, L, hidden)
    grid: AnchorGrid

    @property
    def scale_ids(self) -> torch.Tensor:
        return self.grid.scale_ids

    def __len__(self):
        return self.tokens.shape[1]


class Projection(nn.Module):
    """One pointwise projection (linear + LayerNorm) per pyramid level."""

    def __init__(self, neck_dims, hidden_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(nn.Sequential(nn.Linear(c, hidden_dim), nn.LayerNorm(hidden_dim)) for c in neck_dims)
        self.neck_dims = tuple(neck_dims)

    def forward(self, fp: FeaturePyramid) -> TokenMemory:
        return project_and_concat(self, fp)


def project_and_concat(proj: Projection, fp: FeaturePyramid) -> TokenMemory:
    parts = []
    for x, layer, c in zip(fp.maps(), proj.layers, proj.neck_dims):
        if x.shape[1] != c:
            raise ValueError(f"pyramid level has {x.shape[1]} channels, projection expects {c}")
        parts.append(layer(x.flatten(2).transpose(1, 2)))
    image_size = fp.p3.shape[-1] * fp.strides[0]
    grid = make_anchors(image_size, fp.strides, parts[0].dtype)
    return TokenMemory(torch.cat(parts, 1), grid)


class MLP(nn.Module):
    def __init__(self, din, dhidden, dout, layers):
        super().__init__()
        dims = [din] + [dhidden] * (layers - 1) + [dout]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


@dataclass
class ProposalSet:
    logits: torch.Tensor  # (B, L, C)
    box_logits: torch.Tensor  # (B, L, 4) inverse-sigmoid cxcywh
    selected: torch.Tensor  # (B, K) token ids, by descending score

    def gather(self, t: torch.Tensor) -> torch.Tensor:
        idx = self.selected.unsqueeze(-1).expand(-1, -1, t.shape[-1])
        return torch.gather(t, 1, idx)

    @property
    def selected_logits(self):
        return self.gather(self.logits)

    @property
    def selected_box_logits(self):
        return self.gather(self.box_logits)

    @property
    def selected_boxes(self):
        return self.selected_box_logits.sigmoid()

    @property
    def selected_scores(self):
        return self.selected_logits.sigmoid().max(-1).values


def prior_box_logits(grid: AnchorGrid) -> torch.Tensor:
    """Token prior: its cell center and a square of side 0.05 * stride / 8."""
    c = grid.normalized_centers
    side = 0.05 * grid.strides / 8
    return inverse_sigmoid(torch.cat([c, side[:, None].expand(-1, 2)], -1))


def select_topk(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest scores per row; ties go to the lower index."""
    if k > scores.shape[-1]:
        raise ValueError(f"num_queries={k} exceeds the number of tokens {scores.shape[-1]}")
    return torch.sort(scores, dim=-1, descending=True, stable=True).indices[..., :k]


class QuerySelector(nn.Module):
    """Shared token-wise proposal head plus top-K selection."""

    def __init__(self, hidden_dim: int, num_classes: int, num_queries: int, prior_prob: float = 0.01):
        super().__init__()
        self.num_queries = num_queries
        self.output = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.LayerNorm(hidden_dim))
        self.class_head = nn.Linear(hidden_dim, num_classes)
        self.box_head = MLP(hidden_dim, hidden_dim, 4, 3)
        nn.init.constant_(self.class_head.bias, -math.log((1 - prior_prob) / prior_prob))
        nn.init.zeros_(self.box_head.layers[-1].weight)
        nn.init.zeros_(self.box_head.layers[-1].bias)

    def forward(self, mem: TokenMemory, num_queries: int | None = None) -> ProposalSet:
        return propose(self, mem, num_queries)


def propose(selector: QuerySelector, mem: TokenMemory, num_queries: int | None = None) -> ProposalSet:
    k = selector.num_queries if num_queries is None else num_queries
    h = selector.output(mem.tokens)
    logits = selector.class_head(h)
    box_logits = selector.box_head(h) + prior_box_logits(mem.grid).to(h.dtype)
    selected = select_topk(logits.detach().sigmoid().max(-1).values, k)
    return ProposalSet(logits, box_logits, selected)
